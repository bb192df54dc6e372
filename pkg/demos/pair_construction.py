"""Build chosen/rejected pairs under mixing strategies, buckets, and budgets.

    python demos/pair_construction.py
"""

from prefpipe import (
    build_pairs,
    candidate_pairs,
    filter_pairs,
    match_margin_distributions,
    sample_per_instruction,
)
from prefpipe.model import Instruction, Policy, Response, Turn
from prefpipe.pairs import MarginBucket, MixStrategy, ScoredResponse, ScoreTier, margin_histogram

instruction = Instruction.from_turns([Turn("user", "Draft a polite decline email.")], "demo")


def scored(model, policy, text, score):
    return ScoredResponse(
        Response.from_text(instruction.id, model, policy, text, 1.0 if policy is Policy.ON else 0.0),
        float(score),
    )


# Four on-policy samples (the model being aligned, high temperature) and four
# off-policy responses from external models.
universe = [
    scored("tuned-model", Policy.ON, "Thanks so much; sadly I must pass this time.", 8),
    scored("tuned-model", Policy.ON, "I must decline, but I appreciate the offer.", 7),
    scored("tuned-model", Policy.ON, "No thanks.", 4),
    scored("tuned-model", Policy.ON, "Regretfully, I cannot make it.", 7),
    scored("model-x", Policy.OFF, "Unfortunately I have to decline your kind invitation.", 6),
    scored("model-y", Policy.OFF, "Can't come. Bye.", 2),
    scored("model-z", Policy.OFF, "I would love to, but prior commitments prevent me.", 7),
    scored("model-w", Policy.OFF, "Declined.", 3),
]

# 1. Candidate universes per mixing strategy (4 on + 4 off):
print("candidate counts per mixing strategy")
for strategy in MixStrategy:
    print(f"  {strategy.value:18s} {len(candidate_pairs(universe, strategy)):3d}")

# 2. Orientation: chosen is the higher scorer; ties drop; the ablation arms
#    additionally require the forced side to be the winner.
pairs, dropped = build_pairs(universe, MixStrategy.MID_MIX)
print(f"\nMidMix oriented pairs: {len(pairs)}, dropped: {len(dropped)}")
for pair in pairs:
    print(
        f"  margin {pair.margin:.0f} ({MarginBucket.classify(pair.margin).value:8s}) "
        f"chosen {pair.chosen_score:.0f} ({ScoreTier.classify(pair.chosen_score).value:4s}) "
        f"mix {pair.mix.value}"
    )

# 3. Margin/score filters are conjunctive: moderate contrast AND a strong winner.
kept = filter_pairs(pairs, margin_bucket="Moderate", score_tier="High")
print(f"\nafter Moderate-margin + High-tier filters: {len(kept)} pair(s)")

# 4. Budget sampling caps pairs per instruction, deterministically per seed.
sampled, shortfalls = sample_per_instruction(kept, budget=4, rng_seed=11)
print(f"sampled {len(sampled)} (budget 4); shortfalls: {shortfalls}")

# 5. Comparing two experimental arms fairly requires identical margin
#    profiles: each arm is trimmed to the per-bin histogram intersection.
arm_a, _ = build_pairs(universe, MixStrategy.PURE_OFF)
arm_b, _ = build_pairs(universe, MixStrategy.LOW_MIX)
trimmed = match_margin_distributions({"pure_off": arm_a, "low_mix": arm_b}, rng_seed=0)
print("\nmargin histograms after matching:")
for name, arm in trimmed.items():
    print(f"  {name:9s} {margin_histogram(arm)}")
