"""Staged pipeline: ingest -> generate -> annotate -> select -> pair -> stats -> export -> verify.

Every stage is idempotent: unchanged inputs and config reproduce byte-identical
outputs (the gateway cache pins temperature-0 calls, sampling calls carry
seeds, and all file writes are deterministically ordered). Each stage writes a
manifest recording input, config, and output hashes so tampering is
detectable, and rejected records always land in sidecar files with reasons.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import annotation as anno
from . import dpo as dpo_math
from . import pairs as pairlib
from . import selection as sel
from .gateway import ChatMessage, ChatRequest, Gateway, GatewayConfig
from .model import (
    AnnotationRecord,
    Instruction,
    Policy,
    PreferencePair,
    Response,
    ScoreEntry,
    ScoredSet,
    ScoringMethod,
    Strategy,
    Turn,
    read_stage_file,
    write_stage_file,
    TOKENIZER_LABEL,
)
from .stats import compute_stats
from .validation import validate_files

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES = ("ingest", "generate", "annotate", "select", "pair", "stats", "export", "verify")

F_INSTRUCTIONS = "instructions.jsonl"
F_INSTRUCTIONS_REJECTS = "instructions.rejects.jsonl"
F_RESPONSES = "responses.jsonl"
F_RESPONSES_REJECTS = "responses.rejects.jsonl"
F_ANNOTATIONS = "annotations.jsonl"
F_ANNOTATIONS_REJECTS = "annotations.rejects.jsonl"
F_SCORED_SETS = "scored_sets.jsonl"
F_SELECTED = "selected_instructions.txt"
F_SELECTION_SUMMARY = "selection_summary.json"
F_QUALITY_TAGS = "quality_tags.jsonl"
F_PAIRS = "pairs.jsonl"
F_PAIRS_REJECTS = "pairs.rejects.jsonl"
F_STATS = "stats.json"
F_EXPORT = "dpo.jsonl"
F_VERIFY_REPORT = "verify_report.json"

_STAGE_DATA_FILES = (F_INSTRUCTIONS, F_RESPONSES, F_ANNOTATIONS, F_SCORED_SETS, F_PAIRS)
_REJECT_FILES = (
    F_INSTRUCTIONS_REJECTS,
    F_RESPONSES_REJECTS,
    F_ANNOTATIONS_REJECTS,
    F_PAIRS_REJECTS,
)


class PipelineError(Exception):
    pass


class MissingPriorStage(PipelineError):
    pass


class ConfigInvalid(PipelineError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    policy: Policy

    def to_payload(self) -> dict:
        return {"model_id": self.model_id, "policy": self.policy.value}


@dataclass(frozen=True)
class GenerationConfig:
    model_pool: tuple[ModelSpec, ...] = ()
    on_policy_model: str = ""
    n_on: int = 4
    n_off: int = 4
    on_policy_temperature: float = 1.0
    off_policy_temperature: float = 0.0
    max_tokens: int = 1024

    def to_payload(self) -> dict:
        return {
            "model_pool": [m.to_payload() for m in self.model_pool],
            "on_policy_model": self.on_policy_model,
            "n_on": self.n_on,
            "n_off": self.n_off,
            "on_policy_temperature": self.on_policy_temperature,
            "off_policy_temperature": self.off_policy_temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class AnnotationConfig:
    strategy: Strategy = Strategy.SINGLE_BASIC
    scoring_method: ScoringMethod = ScoringMethod.GREEDY
    annotator_model: str = "Llama-3.1-70B-Instruct"
    n_runs: int = 5
    question_model: str = anno.DEFAULT_QUESTION_MODEL

    def to_payload(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "scoring_method": self.scoring_method.value,
            "annotator_model": self.annotator_model,
            "n_runs": self.n_runs,
            "question_model": self.question_model,
        }


@dataclass(frozen=True)
class InstagConfig:
    judge_models: tuple[str, ...] = sel.DEFAULT_JUDGE_MODELS
    min_mean_score: float = 5.0

    def to_payload(self) -> dict:
        return {
            "judge_models": list(self.judge_models),
            "min_mean_score": self.min_mean_score,
        }


@dataclass(frozen=True)
class SelectionConfig:
    max_tokens: int = sel.DEFAULT_MAX_TOKENS
    variance_bucket: sel.VarianceBucket | None = None
    instag: InstagConfig | None = None
    turn_split: str | None = None

    def to_payload(self) -> dict:
        return {
            "max_tokens": self.max_tokens,
            "variance_bucket": None if self.variance_bucket is None else self.variance_bucket.value,
            "instag": None if self.instag is None else self.instag.to_payload(),
            "turn_split": self.turn_split,
        }


@dataclass(frozen=True)
class PairingConfig:
    strategy: pairlib.MixStrategy = pairlib.MixStrategy.MID_MIX
    margin_bucket: pairlib.MarginBucket | None = None
    score_tier: pairlib.ScoreTier | None = None
    budget: int = pairlib.DEFAULT_PAIR_BUDGET
    seed: int = 0

    def to_payload(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "margin_bucket": None if self.margin_bucket is None else self.margin_bucket.value,
            "score_tier": None if self.score_tier is None else self.score_tier.value,
            "budget": self.budget,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class IngestConfig:
    input_path: str | None = None
    token_counts_path: str | None = None
    source_label: str = "local"

    def to_payload(self) -> dict:
        return {
            "input_path": self.input_path,
            "token_counts_path": self.token_counts_path,
            "source_label": self.source_label,
        }


@dataclass(frozen=True)
class PipelineConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    output_dir: str = "stage_out"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "gateway": self.gateway.to_payload(),
            "ingest": self.ingest.to_payload(),
            "generation": self.generation.to_payload(),
            "annotation": self.annotation.to_payload(),
            "selection": self.selection.to_payload(),
            "pairing": self.pairing.to_payload(),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_payload(), ensure_ascii=False, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def validate(self) -> None:
        gen = self.generation
        if gen.n_on + gen.n_off < 2:
            raise ConfigInvalid("n_on + n_off must be >= 2")
        on_models = [m for m in gen.model_pool if m.policy is Policy.ON]
        if gen.model_pool:
            if len(on_models) != 1:
                raise ConfigInvalid("model_pool must contain exactly one on-policy model")
            if gen.on_policy_model and gen.on_policy_model != on_models[0].model_id:
                raise ConfigInvalid("on_policy_model must match the pool's on-policy entry")
        if self.pairing.budget < 1:
            raise ConfigInvalid("pairing.budget must be >= 1")
        if self.pairing.seed is None:
            raise ConfigInvalid("pairing.seed is required: pairing samples pairs")
        if self.annotation.n_runs < 1:
            raise ConfigInvalid("annotation.n_runs must be >= 1")
        if self.selection.turn_split not in (None, "single_turn", "multi_turn"):
            raise ConfigInvalid(f"unknown turn_split {self.selection.turn_split!r}")

    @classmethod
    def from_payload(cls, payload: Mapping) -> "PipelineConfig":
        try:
            version = int(payload.get("schema_version", SCHEMA_VERSION))
            if version != SCHEMA_VERSION:
                raise ConfigInvalid(f"unsupported schema_version {version}")
            gen = payload.get("generation", {})
            selection = payload.get("selection", {})
            instag = selection.get("instag")
            pairing = payload.get("pairing", {})
            annotation = payload.get("annotation", {})
            ingest = payload.get("ingest", {})
            config = cls(
                gateway=GatewayConfig.from_payload(payload.get("gateway", {})),
                ingest=IngestConfig(
                    input_path=ingest.get("input_path"),
                    token_counts_path=ingest.get("token_counts_path"),
                    source_label=str(ingest.get("source_label", "local")),
                ),
                generation=GenerationConfig(
                    model_pool=tuple(
                        ModelSpec(str(m["model_id"]), Policy(m["policy"]))
                        for m in gen.get("model_pool", [])
                    ),
                    on_policy_model=str(gen.get("on_policy_model", "")),
                    n_on=int(gen.get("n_on", 4)),
                    n_off=int(gen.get("n_off", 4)),
                    on_policy_temperature=float(gen.get("on_policy_temperature", 1.0)),
                    off_policy_temperature=float(gen.get("off_policy_temperature", 0.0)),
                    max_tokens=int(gen.get("max_tokens", 1024)),
                ),
                annotation=AnnotationConfig(
                    strategy=Strategy(annotation.get("strategy", "SingleBasic")),
                    scoring_method=ScoringMethod(annotation.get("scoring_method", "Greedy")),
                    annotator_model=str(
                        annotation.get("annotator_model", "Llama-3.1-70B-Instruct")
                    ),
                    n_runs=int(annotation.get("n_runs", 5)),
                    question_model=str(
                        annotation.get("question_model", anno.DEFAULT_QUESTION_MODEL)
                    ),
                ),
                selection=SelectionConfig(
                    max_tokens=int(selection.get("max_tokens", sel.DEFAULT_MAX_TOKENS)),
                    variance_bucket=(
                        None
                        if selection.get("variance_bucket") is None
                        else sel.VarianceBucket(selection["variance_bucket"])
                    ),
                    instag=(
                        None
                        if instag is None
                        else InstagConfig(
                            judge_models=tuple(
                                instag.get("judge_models", sel.DEFAULT_JUDGE_MODELS)
                            ),
                            min_mean_score=float(instag.get("min_mean_score", 5.0)),
                        )
                    ),
                    turn_split=selection.get("turn_split"),
                ),
                pairing=PairingConfig(
                    strategy=pairlib.MixStrategy(pairing.get("strategy", "MidMix")),
                    margin_bucket=(
                        None
                        if pairing.get("margin_bucket") is None
                        else pairlib.MarginBucket(pairing["margin_bucket"])
                    ),
                    score_tier=(
                        None
                        if pairing.get("score_tier") is None
                        else pairlib.ScoreTier(pairing["score_tier"])
                    ),
                    budget=int(pairing.get("budget", pairlib.DEFAULT_PAIR_BUDGET)),
                    seed=int(pairing.get("seed", 0)),
                ),
                output_dir=str(payload.get("output_dir", "stage_out")),
                seed=int(payload.get("seed", 0)),
                schema_version=version,
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigInvalid(f"bad pipeline config: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_payload(json.load(fh))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_payload(), fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")


def _deep_merge(base: dict, overrides: Mapping) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def air_preset(overrides: Mapping | None = None) -> PipelineConfig:
    """The recommended recipe: point-wise greedy annotation, low-variance
    instruction selection, and mixed pairs with moderate margins and a
    high-scoring chosen response. Overrides are applied last."""
    base = PipelineConfig().to_payload()
    preset = {
        "annotation": {"strategy": "SingleBasic", "scoring_method": "Greedy"},
        "selection": {"variance_bucket": "Low"},
        "pairing": {
            "strategy": "MidMix",
            "margin_bucket": "Moderate",
            "score_tier": "High",
            "budget": 4,
        },
    }
    merged = _deep_merge(base, preset)
    if overrides:
        merged = _deep_merge(merged, overrides)
    return PipelineConfig.from_payload(merged)


def _file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def _write_jsonl(path: Path, payloads) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for payload in payloads:
            fh.write(json.dumps(payload, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


@dataclass
class StageResult:
    stage: str
    outputs: dict[str, Path]
    summary: dict
    rejects: int = 0


def _require(stage_dir: Path, stage: str, *names: str) -> None:
    missing = [name for name in names if not (stage_dir / name).exists()]
    if missing:
        raise MissingPriorStage(
            f"stage {stage!r} needs {', '.join(missing)}; run the prior stages first"
        )


def _typed(records, kind):
    return [r for r in records if isinstance(r, kind)]


def run_stage(
    stage: str,
    config: PipelineConfig,
    stage_dir: str | Path | None = None,
    backend=None,
    write_csv: bool = False,
) -> StageResult:
    """Run one pipeline stage and write its manifest.

    ``backend`` injects a mock (or any completion backend) in place of the
    live HTTP endpoint.
    """
    if stage not in STAGES:
        raise ConfigInvalid(f"unknown stage {stage!r}")
    config.validate()
    stage_dir = Path(stage_dir if stage_dir is not None else config.output_dir)
    stage_dir.mkdir(parents=True, exist_ok=True)

    runner = {
        "ingest": _stage_ingest,
        "generate": _stage_generate,
        "annotate": _stage_annotate,
        "select": _stage_select,
        "pair": _stage_pair,
        "stats": _stage_stats,
        "export": _stage_export,
        "verify": _stage_verify,
    }[stage]

    needs_gateway = stage in ("generate", "annotate", "select")
    gateway = Gateway(config.gateway, backend=backend) if needs_gateway and (
        backend is not None or config.gateway.endpoint
    ) else None
    if stage == "stats":
        result = runner(config, stage_dir, write_csv=write_csv)
    elif needs_gateway:
        result = runner(config, stage_dir, gateway)
    else:
        result = runner(config, stage_dir)

    inputs = result.summary.pop("_input_files", [])
    _write_json(stage_dir / f"summary_{stage}.json", result.summary)
    result.outputs[f"summary_{stage}.json"] = stage_dir / f"summary_{stage}.json"
    _write_manifest(stage, config, stage_dir, inputs, result.outputs)
    return result


def _write_manifest(
    stage: str,
    config: PipelineConfig,
    stage_dir: Path,
    input_files: Sequence[Path],
    outputs: Mapping[str, Path],
) -> None:
    manifest = {
        "stage": stage,
        "input_hashes": {
            str(Path(p).name): _file_hash(Path(p)) for p in input_files if Path(p).exists()
        },
        "config_hash": config.config_hash(),
        "output_hashes": {name: _file_hash(path) for name, path in sorted(outputs.items())},
    }
    _write_json(stage_dir / "manifests" / f"manifest_{stage}.json", manifest)


def run_pipeline(
    config: PipelineConfig,
    stages: Sequence[str] = STAGES,
    stage_dir: str | Path | None = None,
    backend=None,
) -> list[StageResult]:
    return [run_stage(stage, config, stage_dir=stage_dir, backend=backend) for stage in stages]


# --- stage implementations -------------------------------------------------


def _stage_ingest(config: PipelineConfig, stage_dir: Path) -> StageResult:
    if not config.ingest.input_path:
        raise ConfigInvalid("ingest.input_path is not configured")
    input_path = Path(config.ingest.input_path)
    if not input_path.exists():
        raise MissingPriorStage(f"ingest input {input_path} does not exist")

    external_counts: dict[str, int] = {}
    tokenizer = TOKENIZER_LABEL
    if config.ingest.token_counts_path:
        with Path(config.ingest.token_counts_path).open("r", encoding="utf-8") as fh:
            external_counts = {str(k): int(v) for k, v in json.load(fh).items()}
        tokenizer = f"external:{Path(config.ingest.token_counts_path).name}+{TOKENIZER_LABEL}"

    instructions: dict[str, Instruction] = {}
    duplicates = 0
    rejects: list[dict] = []
    with input_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                turns = tuple(Turn(str(t["role"]), str(t["text"])) for t in row["turns"])
                source = str(row.get("source", config.ingest.source_label))
            except (ValueError, KeyError, TypeError) as exc:
                rejects.append({"line": lineno, "reason": f"{type(exc).__name__}: {exc}"})
                continue
            inst = Instruction.from_turns(turns, source)
            if inst.id in external_counts:
                inst = dataclasses.replace(inst, token_len=external_counts[inst.id])
            if inst.id in instructions:
                duplicates += 1
            instructions[inst.id] = inst

    ordered = [instructions[iid] for iid in sorted(instructions)]
    write_stage_file(stage_dir / F_INSTRUCTIONS, ordered)
    _write_jsonl(stage_dir / F_INSTRUCTIONS_REJECTS, rejects)
    summary = {
        "instructions": len(ordered),
        "duplicates": duplicates,
        "rejects": len(rejects),
        "tokenizer": tokenizer,
        "_input_files": [input_path],
    }
    return StageResult(
        "ingest",
        {
            F_INSTRUCTIONS: stage_dir / F_INSTRUCTIONS,
            F_INSTRUCTIONS_REJECTS: stage_dir / F_INSTRUCTIONS_REJECTS,
        },
        summary,
        rejects=len(rejects),
    )


def _generation_requests(
    config: PipelineConfig, instruction: Instruction
) -> list[tuple[str, Policy, float, int | None]]:
    gen = config.generation
    plan: list[tuple[str, Policy, float, int | None]] = []
    for k in range(1, gen.n_on + 1):
        plan.append((gen.on_policy_model, Policy.ON, gen.on_policy_temperature, k))
    off_ids = sorted(m.model_id for m in gen.model_pool if m.policy is Policy.OFF)
    if len(off_ids) > gen.n_off:
        rng = random.Random(f"{config.seed}:off-models:{instruction.id}")
        off_ids = sorted(rng.sample(off_ids, gen.n_off))
    for model_id in off_ids:
        # Off-policy calls carry a fixed seed so sampling stays reproducible.
        plan.append((model_id, Policy.OFF, gen.off_policy_temperature, 1))
    return plan


def _stage_generate(config: PipelineConfig, stage_dir: Path, gateway: Gateway) -> StageResult:
    _require(stage_dir, "generate", F_INSTRUCTIONS)
    if gateway is None:
        raise ConfigInvalid("generate needs a gateway endpoint or an injected backend")
    instructions = _typed(read_stage_file(stage_dir / F_INSTRUCTIONS), Instruction)

    responses: dict[str, Response] = {}
    rejects: list[dict] = []
    duplicates = 0
    for instruction in sorted(instructions, key=lambda i: i.id):
        messages = tuple(ChatMessage(role=t.role, text=t.text) for t in instruction.turns)
        for model_id, policy, temperature, seed in _generation_requests(config, instruction):
            request = ChatRequest(
                model_id=model_id,
                messages=messages,
                temperature=temperature,
                max_tokens=config.generation.max_tokens,
                seed=seed,
            )
            try:
                result = gateway.complete(request)
            except Exception as exc:
                rejects.append(
                    {
                        "instruction_id": instruction.id,
                        "model_id": model_id,
                        "seed": seed,
                        "reason": f"{type(exc).__name__}: {exc}",
                    }
                )
                continue
            if not result.text:
                rejects.append(
                    {
                        "instruction_id": instruction.id,
                        "model_id": model_id,
                        "seed": seed,
                        "reason": "empty completion",
                    }
                )
                continue
            response = Response.from_text(
                instruction.id, model_id, policy, result.text, temperature
            )
            if response.id in responses:
                duplicates += 1
            responses[response.id] = response

    ordered = sorted(responses.values(), key=lambda r: (r.instruction_id, r.id))
    write_stage_file(stage_dir / F_RESPONSES, ordered)
    _write_jsonl(stage_dir / F_RESPONSES_REJECTS, rejects)
    summary = {
        "responses": len(ordered),
        "rejects": len(rejects),
        "duplicate_completions": duplicates,
        "_input_files": [stage_dir / F_INSTRUCTIONS],
    }
    return StageResult(
        "generate",
        {
            F_RESPONSES: stage_dir / F_RESPONSES,
            F_RESPONSES_REJECTS: stage_dir / F_RESPONSES_REJECTS,
        },
        summary,
        rejects=len(rejects),
    )


def _stage_annotate(config: PipelineConfig, stage_dir: Path, gateway: Gateway) -> StageResult:
    _require(stage_dir, "annotate", F_INSTRUCTIONS, F_RESPONSES)
    if gateway is None:
        raise ConfigInvalid("annotate needs a gateway endpoint or an injected backend")
    instructions = _typed(read_stage_file(stage_dir / F_INSTRUCTIONS), Instruction)
    responses = _typed(read_stage_file(stage_dir / F_RESPONSES), Response)

    spec = anno.StrategySpec.for_strategy(config.annotation.strategy)
    records, rejected = anno.annotate_set(
        instructions,
        responses,
        spec,
        config.annotation.scoring_method,
        gateway,
        config.annotation.annotator_model,
        n_runs=config.annotation.n_runs,
        question_model=config.annotation.question_model,
    )
    write_stage_file(stage_dir / F_ANNOTATIONS, records)
    _write_jsonl(stage_dir / F_ANNOTATIONS_REJECTS, [r.to_payload() for r in rejected])
    summary = {
        "annotations": len(records),
        "rejects": len(rejected),
        "strategy": config.annotation.strategy.value,
        "scoring_method": config.annotation.scoring_method.value,
        "_input_files": [stage_dir / F_INSTRUCTIONS, stage_dir / F_RESPONSES],
    }
    return StageResult(
        "annotate",
        {
            F_ANNOTATIONS: stage_dir / F_ANNOTATIONS,
            F_ANNOTATIONS_REJECTS: stage_dir / F_ANNOTATIONS_REJECTS,
        },
        summary,
        rejects=len(rejected),
    )


def _matching_scores(
    config: PipelineConfig,
    responses: Sequence[Response],
    annotations: Sequence[AnnotationRecord],
) -> dict[str, float]:
    """Score per response under the configured (strategy, method); first record
    wins on duplicates (records arrive sorted)."""
    wanted = (config.annotation.strategy, config.annotation.scoring_method)
    known = {r.id for r in responses}
    scores: dict[str, float] = {}
    for record in annotations:
        if (record.strategy, record.scoring_method) != wanted:
            continue
        if record.response_id in known and record.response_id not in scores:
            scores[record.response_id] = record.score
    return scores


def _stage_select(config: PipelineConfig, stage_dir: Path, gateway: Gateway | None) -> StageResult:
    _require(stage_dir, "select", F_INSTRUCTIONS, F_RESPONSES, F_ANNOTATIONS)
    instructions = _typed(read_stage_file(stage_dir / F_INSTRUCTIONS), Instruction)
    responses = _typed(read_stage_file(stage_dir / F_RESPONSES), Response)
    annotations = _typed(read_stage_file(stage_dir / F_ANNOTATIONS), AnnotationRecord)

    kept, dropped_by_length = sel.length_filter(instructions, config.selection.max_tokens)
    kept_ids = {i.id for i in kept}

    scores = _matching_scores(config, responses, annotations)
    by_instruction: dict[str, list[ScoreEntry]] = {}
    for response in sorted(responses, key=lambda r: (r.instruction_id, r.id)):
        if response.id in scores and response.instruction_id in kept_ids:
            by_instruction.setdefault(response.instruction_id, []).append(
                ScoreEntry(response.id, scores[response.id])
            )

    scored_sets: list[ScoredSet] = []
    too_few: list[str] = []
    for iid in sorted(by_instruction):
        entries = by_instruction[iid]
        if len(entries) < 2:
            too_few.append(iid)
            continue
        scored_sets.append(sel.compute_variance(iid, entries))
    write_stage_file(stage_dir / F_SCORED_SETS, scored_sets)

    if config.selection.variance_bucket is not None:
        selected = sel.select_by_variance(scored_sets, config.selection.variance_bucket)
    else:
        selected = [s.instruction_id for s in scored_sets]

    outputs = {F_SCORED_SETS: stage_dir / F_SCORED_SETS}
    tag_failures: list[dict] = []
    if config.selection.instag is not None:
        if gateway is None:
            raise ConfigInvalid("instag selection needs a gateway endpoint or backend")
        inst_by_id = {i.id: i for i in kept}
        tags = []
        surviving = []
        for iid in selected:
            try:
                tag = sel.instag_quality(
                    inst_by_id[iid], gateway, config.selection.instag.judge_models
                )
            except Exception as exc:
                tag_failures.append({"instruction_id": iid, "reason": str(exc)})
                continue
            tags.append(tag)
            if tag.mean_score >= config.selection.instag.min_mean_score:
                surviving.append(iid)
        _write_jsonl(stage_dir / F_QUALITY_TAGS, [t.to_payload() for t in tags])
        outputs[F_QUALITY_TAGS] = stage_dir / F_QUALITY_TAGS
        selected = surviving

    if config.selection.turn_split is not None:
        inst_by_id = {i.id: i for i in kept}
        split = sel.split_by_turns([inst_by_id[iid] for iid in selected])
        selected = [i.id for i in split[config.selection.turn_split]]

    selected_path = stage_dir / F_SELECTED
    with selected_path.open("w", encoding="utf-8", newline="\n") as fh:
        for iid in selected:
            fh.write(iid + "\n")
    outputs[F_SELECTED] = selected_path

    variances = {s.instruction_id: s.variance for s in scored_sets}
    selected_variances = [variances[iid] for iid in selected if iid in variances]
    selection_summary = {
        "bucket": (
            None
            if config.selection.variance_bucket is None
            else config.selection.variance_bucket.value
        ),
        "count": len(selected),
        "variance_min": min(selected_variances) if selected_variances else None,
        "variance_max": max(selected_variances) if selected_variances else None,
    }
    _write_json(stage_dir / F_SELECTION_SUMMARY, selection_summary)
    outputs[F_SELECTION_SUMMARY] = stage_dir / F_SELECTION_SUMMARY

    summary = {
        **selection_summary,
        "dropped_by_length": dropped_by_length,
        "too_few_scored": too_few,
        "tag_failures": tag_failures,
        "_input_files": [
            stage_dir / F_INSTRUCTIONS,
            stage_dir / F_RESPONSES,
            stage_dir / F_ANNOTATIONS,
        ],
    }
    return StageResult("select", outputs, summary, rejects=len(tag_failures))


def _stage_pair(config: PipelineConfig, stage_dir: Path) -> StageResult:
    _require(stage_dir, "pair", F_RESPONSES, F_ANNOTATIONS)
    responses = _typed(read_stage_file(stage_dir / F_RESPONSES), Response)
    annotations = _typed(read_stage_file(stage_dir / F_ANNOTATIONS), AnnotationRecord)

    selected_path = stage_dir / F_SELECTED
    selected: set[str] | None = None
    if selected_path.exists():
        selected = {
            line.strip() for line in selected_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        }

    scores = _matching_scores(config, responses, annotations)
    grouped: dict[str, list[pairlib.ScoredResponse]] = {}
    for response in responses:
        if response.id not in scores:
            continue
        if selected is not None and response.instruction_id not in selected:
            continue
        grouped.setdefault(response.instruction_id, []).append(
            pairlib.ScoredResponse(response, scores[response.id])
        )

    all_pairs: list[PreferencePair] = []
    rejects: list[dict] = []
    candidates = 0
    filtered_out = 0
    for iid in sorted(grouped):
        try:
            oriented, dropped = pairlib.build_pairs(grouped[iid], config.pairing.strategy)
        except pairlib.InsufficientResponses as exc:
            rejects.append({"instruction_id": iid, "reason": str(exc)})
            continue
        candidates += len(oriented) + len(dropped)
        rejects.extend(dropped)
        kept = pairlib.filter_pairs(
            oriented, config.pairing.margin_bucket, config.pairing.score_tier
        )
        filtered_out += len(oriented) - len(kept)
        all_pairs.extend(kept)

    sampled, shortfalls = pairlib.sample_per_instruction(
        all_pairs, config.pairing.budget, rng_seed=config.pairing.seed
    )
    sampled = sorted(sampled, key=lambda p: (p.instruction_id, p.chosen_id, p.rejected_id))
    write_stage_file(stage_dir / F_PAIRS, sampled)
    _write_jsonl(stage_dir / F_PAIRS_REJECTS, rejects)

    summary = {
        "candidates": candidates,
        "kept_after_filters": len(all_pairs),
        "filtered_out": filtered_out,
        "pairs": len(sampled),
        "rejects": len(rejects),
        "shortfalls": shortfalls,
        "strategy": config.pairing.strategy.value,
        "_input_files": [stage_dir / F_RESPONSES, stage_dir / F_ANNOTATIONS]
        + ([selected_path] if selected is not None else []),
    }
    return StageResult(
        "pair",
        {
            F_PAIRS: stage_dir / F_PAIRS,
            F_PAIRS_REJECTS: stage_dir / F_PAIRS_REJECTS,
        },
        summary,
        rejects=len(rejects),
    )


def _stage_stats(config: PipelineConfig, stage_dir: Path, write_csv: bool = False) -> StageResult:
    _require(stage_dir, "stats", F_INSTRUCTIONS, F_RESPONSES, F_ANNOTATIONS, F_PAIRS)
    instructions = _typed(read_stage_file(stage_dir / F_INSTRUCTIONS), Instruction)
    responses = _typed(read_stage_file(stage_dir / F_RESPONSES), Response)
    annotations = _typed(read_stage_file(stage_dir / F_ANNOTATIONS), AnnotationRecord)
    pairs = _typed(read_stage_file(stage_dir / F_PAIRS), PreferencePair)
    scored_sets = []
    if (stage_dir / F_SCORED_SETS).exists():
        scored_sets = _typed(read_stage_file(stage_dir / F_SCORED_SETS), ScoredSet)

    report = compute_stats(instructions, responses, annotations, scored_sets, pairs)
    report.write_json(stage_dir / F_STATS)
    outputs = {F_STATS: stage_dir / F_STATS}
    if write_csv:
        for path in report.write_csv_tables(stage_dir / "stats_tables"):
            outputs[f"stats_tables/{path.name}"] = path

    inputs = [
        stage_dir / F_INSTRUCTIONS,
        stage_dir / F_RESPONSES,
        stage_dir / F_ANNOTATIONS,
        stage_dir / F_PAIRS,
    ]
    if scored_sets:
        inputs.append(stage_dir / F_SCORED_SETS)
    summary = {
        "dataset_size": report.dataset_size,
        "annotations": len(annotations),
        "_input_files": inputs,
    }
    return StageResult("stats", outputs, summary)


def _stage_export(config: PipelineConfig, stage_dir: Path) -> StageResult:
    _require(stage_dir, "export", F_INSTRUCTIONS, F_RESPONSES, F_PAIRS)
    instructions = _typed(read_stage_file(stage_dir / F_INSTRUCTIONS), Instruction)
    responses = _typed(read_stage_file(stage_dir / F_RESPONSES), Response)
    pairs = _typed(read_stage_file(stage_dir / F_PAIRS), PreferencePair)

    labels = {
        "mix_strategy": config.pairing.strategy.value,
        "margin_bucket": (
            None if config.pairing.margin_bucket is None else config.pairing.margin_bucket.value
        ),
        "score_tier": (
            None if config.pairing.score_tier is None else config.pairing.score_tier.value
        ),
        "annotation_strategy": config.annotation.strategy.value,
        "scoring_method": config.annotation.scoring_method.value,
    }
    rows = pairlib.export_dpo(pairs, instructions, responses, stage_dir / F_EXPORT, labels)
    summary = {
        "rows": rows,
        "_input_files": [stage_dir / F_INSTRUCTIONS, stage_dir / F_RESPONSES, stage_dir / F_PAIRS],
    }
    return StageResult("export", {F_EXPORT: stage_dir / F_EXPORT}, summary)


def _verify_manifests(stage_dir: Path) -> dict[str, bool]:
    """Recompute every hash recorded in the manifests; False means tampering."""
    results: dict[str, bool] = {}
    manifest_dir = stage_dir / "manifests"
    if not manifest_dir.exists():
        return results
    for manifest_path in sorted(manifest_dir.glob("manifest_*.json")):
        if manifest_path.name == "manifest_verify.json":
            continue
        with manifest_path.open("r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        ok = True
        for name, recorded in manifest.get("output_hashes", {}).items():
            target = stage_dir / name
            if not target.exists() or _file_hash(target) != recorded:
                ok = False
        results[manifest_path.name] = ok
    return results


def _stage_verify(config: PipelineConfig, stage_dir: Path) -> StageResult:
    _require(stage_dir, "verify", F_EXPORT)
    data_files = [stage_dir / name for name in _STAGE_DATA_FILES if (stage_dir / name).exists()]
    validation = validate_files(data_files)

    manifest_checks = _verify_manifests(stage_dir)
    try:
        sanity = dpo_math.sanity_check_export(stage_dir / F_EXPORT, seed=config.seed)
        sanity_ok = (
            sanity["loss_at_ref_max_dev"] <= 1e-9
            and sanity["gradient_max_rel_error"] <= 1e-5
            and sanity["gap_increase_fraction"] == 1.0
        )
    except dpo_math.DpoError as exc:
        # An empty export has nothing to check; anything else is a failure.
        empty = "no triples" in str(exc)
        sanity = {"triples": 0, "skipped": str(exc)}
        sanity_ok = empty

    reject_counts = {}
    for name in _REJECT_FILES:
        path = stage_dir / name
        if path.exists():
            reject_counts[name] = sum(
                1 for line in path.read_text(encoding="utf-8").splitlines() if line.strip()
            )
    rejects_total = sum(reject_counts.values())

    ok = validation.ok and sanity_ok and all(manifest_checks.values())
    report = {
        "ok": ok,
        "validation": validation.to_payload(),
        "manifests": manifest_checks,
        "sanity": sanity,
        "sanity_ok": sanity_ok,
        "rejects": reject_counts,
        "rejects_total": rejects_total,
    }
    _write_json(stage_dir / F_VERIFY_REPORT, report)

    summary = {
        "ok": ok,
        "violations": len(validation.violations),
        "sanity_ok": sanity_ok,
        "rejects_total": rejects_total,
        "_input_files": data_files,
    }
    return StageResult(
        "verify",
        {F_VERIFY_REPORT: stage_dir / F_VERIFY_REPORT},
        summary,
        rejects=rejects_total,
    )
