"""Filter and bucket instructions by length, score variance, quality, and turns.

    python demos/instruction_selection.py
"""

from prefpipe import (
    Gateway,
    GatewayConfig,
    MockBackend,
    MockRule,
    compute_variance,
    instag_quality,
    length_filter,
    select_by_variance,
    split_by_turns,
)
from prefpipe.model import Instruction, ScoreEntry, Turn
from prefpipe.selection import VarianceBucket

# Three instructions with very different response-score spreads. Low spread
# means the candidate pool only differs in nuance, which is exactly the signal
# preference training benefits from.
script_scores = {
    "terraform a module": [7, 7, 8, 7, 7],     # fine-grained distinctions
    "write a sonnet":     [4, 6, 7, 8, 9],     # widely spread quality
    "explain this error": [2, 9, 3, 8, 5],     # judges can't agree at all
}

instructions = {}
scored_sets = []
for k, (topic, scores) in enumerate(script_scores.items()):
    inst = Instruction.from_turns([Turn("user", f"Please {topic}.")], source="demo")
    instructions[inst.id] = topic
    entries = [ScoreEntry(f"r-{k}-{j}", float(s)) for j, s in enumerate(scores)]
    sset = compute_variance(inst.id, entries)
    scored_sets.append(sset)
    bucket = VarianceBucket.classify(sset.variance)
    print(f"{topic:22s} scores={scores} variance={sset.variance:.3f} -> {bucket.value}")

low = select_by_variance(scored_sets, "Low")
print("\nselected by the Low bucket:", [instructions[i] for i in low])

# Length filtration: the 4096-token context budget, boundary inclusive.
long_inst = Instruction(
    id="i-long", turns=(Turn("user", "…"),), source="demo", token_len=5000
)
short_inst = Instruction(
    id="i-short", turns=(Turn("user", "…"),), source="demo", token_len=4096
)
kept, dropped = length_filter([long_inst, short_inst], max_tokens=4096)
print(f"\nlength filter kept {[i.id for i in kept]}, dropped {dropped}")

# Quality tagging: two judges each rate the dialogue on a five-level scale and
# the levels are averaged. A mean of 5.0 marks a top-quality instruction.
backend = MockBackend(
    rules=[
        MockRule(model_id="judge-a", text="Dialog quality: Excellent"),
        MockRule(model_id="judge-b", text="Dialog quality: Good"),
    ]
)
gateway = Gateway(GatewayConfig(), backend=backend)
some_inst = Instruction.from_turns([Turn("user", "Summarize this paper.")], "demo")
tag = instag_quality(some_inst, gateway, ["judge-a", "judge-b"])
print(f"\nquality tag per annotator {dict(tag.per_annotator)} -> mean {tag.mean_score}")

# Context-turn split: single-turn vs multi-turn conversations.
multi = Instruction.from_turns(
    [
        Turn("user", "Who won the 1998 world cup?"),
        Turn("assistant", "France."),
        Turn("user", "And who scored in the final?"),
    ],
    "demo",
)
split = split_by_turns([some_inst, multi])
print(
    f"\nturn split: {len(split['single_turn'])} single-turn, "
    f"{len(split['multi_turn'])} multi-turn"
)
