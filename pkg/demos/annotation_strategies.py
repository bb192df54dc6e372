"""Walk through the six judging strategies and three scoring methods.

Everything runs against a scripted mock backend, so the demo is fully
offline and deterministic:

    python demos/annotation_strategies.py
"""

import math

from prefpipe import (
    Gateway,
    GatewayConfig,
    MockBackend,
    MockRule,
    parse_scores,
    render_prompt,
    score_avg,
    score_greedy,
    score_prob,
)
from prefpipe.annotation import PreferenceQuestions, StrategySpec
from prefpipe.model import Instruction, OrderVariant, Policy, Response, Strategy, Turn

instruction = Instruction.from_turns(
    [
        Turn("user", "I need a quick dessert for tonight."),
        Turn("assistant", "How much time do you have?"),
        Turn("user", "Fifteen minutes. What should I make?"),
    ],
    source="demo",
)
resp_a = Response.from_text(
    instruction.id, "small-model", Policy.ON,
    "Microwave mug cake: mix flour, sugar, cocoa, milk; 90 seconds on high.", 1.0,
)
resp_b = Response.from_text(
    instruction.id, "big-model", Policy.OFF,
    "Whip cream with crushed berries and layer over biscuits for a fool.", 0.0,
)

# 1. The six prompt strategies differ in response count, guidelines, and
#    whether the judge must explain itself first.
print("=" * 70)
print("PROMPTS")
print("=" * 70)
single = StrategySpec.for_strategy(Strategy.SINGLE_BASIC)
print(render_prompt(single, instruction, [resp_a]))
print("-" * 70)

questions = PreferenceQuestions(
    instruction_id=instruction.id,
    category="recipe suggestion",
    questions=(
        "Can the dessert be made in fifteen minutes?",
        "Does the response give concrete steps?",
        "Are all ingredients commonly available?",
        "Does it answer the user's actual request?",
    ),
)
fg = StrategySpec.for_strategy(Strategy.PAIR_GUIDED_EXPLAINED_FG)
fg_prompt = render_prompt(fg, instruction, [resp_a, resp_b], questions)
print(fg_prompt[:600], "...\n")

# Reversed order swaps which response occupies slot A, nothing else.
pair = StrategySpec.for_strategy(Strategy.PAIR_BASIC)
fwd = render_prompt(pair, instruction, [resp_a, resp_b])
rev = render_prompt(pair, instruction, [resp_a, resp_b], order_variant=OrderVariant.REVERSED)
assert rev == render_prompt(pair, instruction, [resp_b, resp_a])
print("reversed-order prompt equals the swapped forward prompt:", rev != fwd)

# 2. Parsing is last-line based, so judges that restate the format in prose
#    do not confuse extraction.
print("\n" + "=" * 70)
print("PARSING")
print("=" * 70)
print(parse_scores(single, "The response is solid.\nSCORE: 7"))
print(parse_scores(pair, "EXPLANATION:\nA is faster.\n\nSCORE_A: 8\nSCORE_B: 6"))

# 3. Scoring methods. The mock judge favors resp_a in slot A (position bias),
#    which reversed-order averaging cancels.
print("\n" + "=" * 70)
print("SCORING METHODS (scripted mock judge)")
print("=" * 70)
backend = MockBackend(
    rules=[
        MockRule(contains_in_order=(resp_a.text, resp_b.text), text="SCORE_A: 8\nSCORE_B: 6"),
        MockRule(contains_in_order=(resp_b.text, resp_a.text), text="SCORE_A: 7\nSCORE_B: 7"),
        MockRule(seed=1, text="SCORE: 7"),
        MockRule(seed=2, text="SCORE: 8"),
        MockRule(seed=3, text="SCORE: 7"),
        MockRule(seed=4, text="SCORE: 8"),
        MockRule(seed=5, text="SCORE: 8"),
        MockRule(
            text="7",
            token_distribution=({"7": math.log(3.0), "8": 0.0},),
        ),
    ]
)
gateway = Gateway(GatewayConfig(), backend=backend)

records = score_greedy(pair, instruction, [resp_a, resp_b], gateway, "mock-judge")
for record in records:
    label = "A" if record.response_id == resp_a.id else "B"
    print(f"pairwise greedy score for {label}: {record.score}  (both orders averaged)")

avg = score_avg(instruction, resp_a, gateway, "mock-judge")
print(f"sampled average over runs {[r.parsed_score for r in avg.raw_runs]}: {avg.score}")

prob = score_prob(instruction, resp_a, gateway, "mock-judge")
print(f"probability-weighted score from digit log-scores {{7: ln 3, 8: 0}}: {prob.score}")
assert prob.score == 7.25
