"""Run every pipeline stage end to end against a scripted mock backend.

The mock script plays both the generation models and the judge, so the whole
run is offline and reproducible:

    python demos/full_pipeline.py
"""

import json
import tempfile
from pathlib import Path

from prefpipe.gateway import mock_backend
from prefpipe.pipeline import STAGES, air_preset, run_pipeline

QUERY = "Suggest a name for a hiking club newsletter."

# One instruction; two on-policy samples from the model being aligned plus two
# off-policy responses, each with the score the scripted judge will assign.
# The spread keeps the instruction in the low-variance bucket, and the top
# on-policy response beats each off-policy one by a moderate margin.
COMPLETIONS = [
    ("aligned-model", 1, "Trail Mix Dispatch: stories from the path.", 8),
    ("aligned-model", 2, "Call it Happy Feet Weekly.", 7),
    ("peak-model", None, "The Summit Circular, crisp and memorable.", 6),
    ("valley-model", None, "Newsletter McNewsletterface.", 5),
]

rules = []
for model, seed, text, score in COMPLETIONS:
    rules.append({"model_id": "mock-judge", "contains": [text], "text": f"SCORE: {score}"})
for model, seed, text, score in COMPLETIONS:
    rule = {"model_id": model, "contains": [QUERY], "text": text}
    if seed is not None:
        rule["seed"] = seed
    rules.append(rule)

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    raw = tmp / "raw_instructions.jsonl"
    raw.write_text(
        json.dumps({"turns": [{"role": "user", "text": QUERY}], "source": "demo"}) + "\n",
        encoding="utf-8",
    )

    config = air_preset(
        {
            "ingest": {"input_path": str(raw)},
            "generation": {
                "model_pool": [
                    {"model_id": "aligned-model", "policy": "OnPolicy"},
                    {"model_id": "peak-model", "policy": "OffPolicy"},
                    {"model_id": "valley-model", "policy": "OffPolicy"},
                ],
                "on_policy_model": "aligned-model",
                "n_on": 2,
                "n_off": 2,
            },
            "annotation": {"annotator_model": "mock-judge"},
            "output_dir": str(tmp / "stages"),
        }
    )

    results = run_pipeline(config, STAGES, backend=mock_backend({"rules": rules}))
    for result in results:
        summary = {k: v for k, v in result.summary.items() if not k.startswith("_")}
        print(f"{result.stage:9s} rejects={result.rejects} {json.dumps(summary, default=str)}")

    print("\nexported training rows:")
    for line in (tmp / "stages" / "dpo.jsonl").read_text().splitlines():
        row = json.loads(line)
        meta = row["meta"]
        print(
            f"  margin {meta['margin']:.0f} chosen {meta['chosen_score']:.0f} "
            f"[{meta['mix']}] {row['chosen_text']!r} > {row['rejected_text']!r}"
        )

    report = json.loads((tmp / "stages" / "verify_report.json").read_text())
    print(f"\nverify: ok={report['ok']} sanity_ok={report['sanity_ok']}")
