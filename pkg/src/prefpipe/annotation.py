"""Annotation strategies, score parsing, scoring methods, and batch annotation.

Six prompt strategies span three dimensions (response count, guideline
complexity, explanation requirement). Pairwise strategies always evaluate both
presentation orders and average per response, which cancels position bias.
Three scoring methods sit on top of the point-wise prompt: a single greedy
run, a 5-run sampled average, and a probability-weighted expectation over the
digit tokens 0-9.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Mapping, Sequence

from .gateway import ChatMessage, ChatRequest, Gateway
from .model import (
    AnnotationRecord,
    Instruction,
    OrderVariant,
    RawRun,
    Response,
    ScoringMethod,
    Strategy,
)

logger = logging.getLogger(__name__)

MAX_TOKENS_SCORE_ONLY = 16
MAX_TOKENS_EXPLAINED = 1024
MAX_TOKENS_QUESTIONS = 512
DEFAULT_AVG_RUNS = 5
AVG_TEMPERATURE = 1.0
# Seed offset distinguishing a retried sampling run from the original.
RETRY_SEED_OFFSET = 1000

DEFAULT_QUESTION_MODEL = "Llama-3.1-8B-Instruct"


class AnnotationError(Exception):
    pass


class ArityMismatch(AnnotationError):
    pass


class MissingQuestions(AnnotationError):
    pass


class ParseFailure(AnnotationError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class OutOfRange(AnnotationError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class QuestionParseFailure(AnnotationError):
    pass


class NoDigitPosition(AnnotationError):
    pass


class Guideline(str, Enum):
    NONE = "None"
    COARSE = "Coarse"
    FINE_GRAINED = "FineGrained"


class ResponseCount(str, Enum):
    SINGLE = "Single"
    PAIR = "Pair"


_STRATEGY_GRID: dict[Strategy, tuple[ResponseCount, Guideline, bool]] = {
    Strategy.SINGLE_BASIC: (ResponseCount.SINGLE, Guideline.NONE, False),
    Strategy.PAIR_BASIC: (ResponseCount.PAIR, Guideline.NONE, False),
    Strategy.PAIR_GUIDED: (ResponseCount.PAIR, Guideline.COARSE, False),
    Strategy.PAIR_EXPLAINED: (ResponseCount.PAIR, Guideline.NONE, True),
    Strategy.PAIR_GUIDED_EXPLAINED: (ResponseCount.PAIR, Guideline.COARSE, True),
    Strategy.PAIR_GUIDED_EXPLAINED_FG: (ResponseCount.PAIR, Guideline.FINE_GRAINED, True),
}

_TEMPLATE_FILES: dict[Strategy, str] = {
    Strategy.SINGLE_BASIC: "single_basic.txt",
    Strategy.PAIR_BASIC: "pair_basic.txt",
    Strategy.PAIR_GUIDED: "pair_guided.txt",
    Strategy.PAIR_EXPLAINED: "pair_explained.txt",
    Strategy.PAIR_GUIDED_EXPLAINED: "pair_guided_explained.txt",
    Strategy.PAIR_GUIDED_EXPLAINED_FG: "pair_guided_explained_fg.txt",
}


@dataclass(frozen=True)
class StrategySpec:
    strategy: Strategy
    response_count: ResponseCount
    guideline: Guideline
    explained: bool

    def __post_init__(self):
        expected = _STRATEGY_GRID[self.strategy]
        if (self.response_count, self.guideline, self.explained) != expected:
            raise ValueError(
                f"{self.strategy.value} must have dimensions {expected}, got "
                f"({self.response_count}, {self.guideline}, {self.explained})"
            )

    @classmethod
    def for_strategy(cls, strategy: Strategy | str) -> "StrategySpec":
        strategy = Strategy(strategy)
        count, guideline, explained = _STRATEGY_GRID[strategy]
        return cls(strategy, count, guideline, explained)

    @property
    def pairwise(self) -> bool:
        return self.response_count is ResponseCount.PAIR

    @property
    def max_tokens(self) -> int:
        return MAX_TOKENS_EXPLAINED if self.explained else MAX_TOKENS_SCORE_ONLY


@dataclass(frozen=True)
class PreferenceQuestions:
    instruction_id: str
    category: str
    questions: tuple[str, ...]

    def __post_init__(self):
        if not self.category:
            raise ValueError("category must be non-empty")
        if not 4 <= len(self.questions) <= 7:
            raise ValueError(f"need 4-7 questions, got {len(self.questions)}")


@dataclass(frozen=True)
class TokenDistribution:
    """Log-scores for whichever digit tokens the backend surfaced."""

    digit_scores: Mapping[str, float]

    def __post_init__(self):
        if not self.digit_scores:
            raise ValueError("at least one digit must be present")
        for digit in self.digit_scores:
            if digit not in "0123456789" or len(digit) != 1:
                raise ValueError(f"not a digit token: {digit!r}")

    def probabilities(self) -> dict[str, float]:
        """Softmax over the digits present (renormalized when some are absent)."""
        peak = max(self.digit_scores.values())
        weights = {d: math.exp(s - peak) for d, s in self.digit_scores.items()}
        total = sum(weights.values())
        return {d: w / total for d, w in weights.items()}

    def expected_score(self) -> float:
        # Ratio of weight sums rather than a dot product with normalized
        # probabilities: exact for degenerate and uniform distributions.
        peak = max(self.digit_scores.values())
        weights = {d: math.exp(s - peak) for d, s in self.digit_scores.items()}
        return sum(int(d) * w for d, w in weights.items()) / sum(weights.values())


def load_template(name: str) -> str:
    """Raw template text as shipped (trailing newline kept)."""
    return (resources.files("prefpipe") / "templates" / name).read_text(encoding="utf-8")


def template_for(strategy: Strategy | str) -> str:
    return load_template(_TEMPLATE_FILES[Strategy(strategy)])


def render_history(turns: Sequence) -> str:
    lines = []
    for turn in turns:
        label = "User" if turn.role == "user" else "Assistant"
        lines.append(f"{label}: {turn.text}")
    return "\n".join(lines)


def _numbered(lines: Sequence[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def render_prompt(
    spec: StrategySpec,
    instruction: Instruction,
    responses: Sequence[Response],
    questions: PreferenceQuestions | None = None,
    order_variant: OrderVariant = OrderVariant.FORWARD,
) -> str:
    """Fill the strategy's template; Reversed swaps which response sits in slot A."""
    expected = 2 if spec.pairwise else 1
    if len(responses) != expected:
        raise ArityMismatch(
            f"{spec.strategy.value} takes {expected} response(s), got {len(responses)}"
        )
    if spec.guideline is Guideline.FINE_GRAINED and questions is None:
        raise MissingQuestions(f"{spec.strategy.value} requires preference questions")

    template = template_for(spec.strategy).rstrip("\n")
    slots = {
        "dialogue_history": render_history(instruction.history),
        "instruction": instruction.query,
    }
    if spec.pairwise:
        first, second = responses
        if order_variant is OrderVariant.REVERSED:
            first, second = second, first
        slots["response_a"] = first.text
        slots["response_b"] = second.text
    else:
        slots["response"] = responses[0].text
    if spec.guideline is Guideline.FINE_GRAINED:
        assert questions is not None
        slots["questions_prompt"] = _numbered(questions.questions)
        slots["explanation_prompt"] = _numbered(
            ["[Yes/No] - [Brief explanation]"] * len(questions.questions)
        )
    return template.format(**slots)


_SINGLE_SCORE_RE = re.compile(r"^[ \t]*SCORE:\s*\[?(-?\d+)\]?[ \t]*$", re.MULTILINE)
_SCORE_A_RE = re.compile(r"^[ \t]*SCORE_A:\s*\[?(-?\d+)\]?[ \t]*$", re.MULTILINE)
_SCORE_B_RE = re.compile(r"^[ \t]*SCORE_B:\s*\[?(-?\d+)\]?[ \t]*$", re.MULTILINE)


def _last_int(pattern: re.Pattern, reply: str, label: str) -> int:
    matches = pattern.findall(reply)
    if not matches:
        raise ParseFailure(f"no {label} line found", raw_text=reply)
    value = int(matches[-1])
    if not 0 <= value <= 9:
        raise OutOfRange(f"{label} value {value} outside 0-9", raw_text=reply)
    return value


def parse_scores(spec: StrategySpec, reply_text: str) -> int | tuple[int, int]:
    """Extract the last score line(s) from a judge reply.

    Explanation blocks are ignored implicitly because the required score lines
    come last; models that restate the format earlier in prose do not confuse
    extraction.
    """
    if spec.pairwise:
        return (
            _last_int(_SCORE_A_RE, reply_text, "SCORE_A"),
            _last_int(_SCORE_B_RE, reply_text, "SCORE_B"),
        )
    return _last_int(_SINGLE_SCORE_RE, reply_text, "SCORE")


def _extract_json_object(text: str) -> dict:
    """First balanced top-level JSON object in the text, prose around it ignored."""
    start = text.find("{")
    while start >= 0:
        depth = 0
        in_string = False
        escaped = False
        for idx in range(start, len(text)):
            ch = text[idx]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : idx + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    raise ValueError("no JSON object found in reply")


def _question_request(instruction: Instruction, generator_model: str) -> ChatRequest:
    prompt = load_template("question_generation.txt").rstrip("\n").format(
        dialogue_history=render_history(instruction.history),
        instruction=instruction.query,
    )
    return ChatRequest(
        model_id=generator_model,
        messages=(ChatMessage(role="user", text=prompt),),
        temperature=0.0,
        max_tokens=MAX_TOKENS_QUESTIONS,
    )


def generate_questions(
    instruction: Instruction,
    generator_model: str,
    gateway: Gateway,
) -> PreferenceQuestions:
    """Ask the generator model for 4-7 task-specific preference questions."""
    request = _question_request(instruction, generator_model)
    last_error: Exception | None = None
    for attempt in range(2):
        result = gateway.complete(request if attempt == 0 else _bump_seed(request))
        try:
            obj = _extract_json_object(result.text)
            questions = [str(q) for q in obj["preference_questions"]]
            return PreferenceQuestions(
                instruction_id=instruction.id,
                category=str(obj["category"]),
                questions=tuple(questions),
            )
        except (ValueError, KeyError, TypeError) as exc:
            last_error = exc
            logger.warning("question parse failed for %s: %s", instruction.id, exc)
    raise QuestionParseFailure(
        f"could not obtain 4-7 questions for {instruction.id}: {last_error}"
    )


def _bump_seed(request: ChatRequest) -> ChatRequest:
    # A changed seed forces a fresh request instead of a cache hit; for
    # temperature-0 calls the retry is a no-op on deterministic backends.
    if request.seed is None:
        return request
    return ChatRequest(
        model_id=request.model_id,
        messages=request.messages,
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        want_token_distribution=request.want_token_distribution,
        seed=request.seed + RETRY_SEED_OFFSET,
    )


def _score_request(
    spec: StrategySpec,
    instruction: Instruction,
    responses: Sequence[Response],
    annotator_model: str,
    questions: PreferenceQuestions | None = None,
    order_variant: OrderVariant = OrderVariant.FORWARD,
    temperature: float = 0.0,
    seed: int | None = None,
    want_token_distribution: bool = False,
) -> ChatRequest:
    prompt = render_prompt(spec, instruction, responses, questions, order_variant)
    return ChatRequest(
        model_id=annotator_model,
        messages=(ChatMessage(role="user", text=prompt),),
        temperature=temperature,
        max_tokens=spec.max_tokens,
        want_token_distribution=want_token_distribution,
        seed=seed,
    )


def _call_and_parse(gateway: Gateway, spec: StrategySpec, request: ChatRequest):
    """One judge call with a single parse retry, returning (scores, raw_text)."""
    result = gateway.complete(request)
    try:
        return parse_scores(spec, result.text), result.text
    except (ParseFailure, OutOfRange) as first_error:
        retry = _bump_seed(request)
        result = gateway.complete(retry)
        try:
            return parse_scores(spec, result.text), result.text
        except (ParseFailure, OutOfRange):
            raise first_error


def score_greedy(
    spec: StrategySpec,
    instruction: Instruction,
    responses: Sequence[Response],
    gateway: Gateway,
    annotator_model: str,
    questions: PreferenceQuestions | None = None,
) -> list[AnnotationRecord]:
    """Greedy decoding (temperature 0), one record per response.

    Pairwise strategies issue a Forward and a Reversed call and average each
    response's two slot scores, so position bias cancels.
    """
    if not spec.pairwise:
        request = _score_request(spec, instruction, responses, annotator_model, questions)
        parsed, raw_text = _call_and_parse(gateway, spec, request)
        run = RawRun(OrderVariant.NA, 0, float(parsed), raw_text)
        return [
            AnnotationRecord.from_runs(
                responses[0].id, spec.strategy, ScoringMethod.GREEDY, [run], annotator_model
            )
        ]

    forward_req = _score_request(
        spec, instruction, responses, annotator_model, questions, OrderVariant.FORWARD
    )
    reversed_req = _score_request(
        spec, instruction, responses, annotator_model, questions, OrderVariant.REVERSED
    )
    (fwd_a, fwd_b), fwd_raw = _call_and_parse(gateway, spec, forward_req)
    (rev_a, rev_b), rev_raw = _call_and_parse(gateway, spec, reversed_req)

    first, second = responses
    # Forward puts `first` in slot A; Reversed puts it in slot B.
    first_runs = [
        RawRun(OrderVariant.FORWARD, 0, float(fwd_a), fwd_raw),
        RawRun(OrderVariant.REVERSED, 1, float(rev_b), rev_raw),
    ]
    second_runs = [
        RawRun(OrderVariant.FORWARD, 0, float(fwd_b), fwd_raw),
        RawRun(OrderVariant.REVERSED, 1, float(rev_a), rev_raw),
    ]
    return [
        AnnotationRecord.from_runs(
            first.id, spec.strategy, ScoringMethod.GREEDY, first_runs, annotator_model
        ),
        AnnotationRecord.from_runs(
            second.id, spec.strategy, ScoringMethod.GREEDY, second_runs, annotator_model
        ),
    ]


def score_avg(
    instruction: Instruction,
    response: Response,
    gateway: Gateway,
    annotator_model: str,
    n_runs: int = DEFAULT_AVG_RUNS,
) -> AnnotationRecord:
    """Mean of n point-wise scores sampled at temperature 1.0 with seeds 1..n.

    Point-wise only; if any run still fails parsing after one retry the whole
    record fails rather than averaging a partial set.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    spec = StrategySpec.for_strategy(Strategy.SINGLE_BASIC)
    runs = []
    for i in range(1, n_runs + 1):
        request = _score_request(
            spec,
            instruction,
            [response],
            annotator_model,
            temperature=AVG_TEMPERATURE,
            seed=i,
        )
        parsed, raw_text = _call_and_parse(gateway, spec, request)
        runs.append(RawRun(OrderVariant.NA, i - 1, float(parsed), raw_text))
    return AnnotationRecord.from_runs(
        response.id, Strategy.SINGLE_BASIC, ScoringMethod.AVG, runs, annotator_model
    )


def digits_from_positions(
    positions: Sequence[Mapping[str, float]],
) -> TokenDistribution:
    """Digit log-scores at the first generated position that offers any digit.

    Candidate tokens that strip to a single digit count; duplicate digit
    variants (for example "7" and " 7") are pooled by log-sum-exp.
    """
    for position in positions:
        digit_scores: dict[str, float] = {}
        for token, log_score in position.items():
            stripped = token.strip()
            if len(stripped) == 1 and stripped in "0123456789":
                if stripped in digit_scores:
                    a, b = digit_scores[stripped], float(log_score)
                    hi, lo = max(a, b), min(a, b)
                    digit_scores[stripped] = hi + math.log1p(math.exp(lo - hi))
                else:
                    digit_scores[stripped] = float(log_score)
        if digit_scores:
            return TokenDistribution(digit_scores)
    raise NoDigitPosition("no generated position contains a digit candidate")


def score_prob(
    instruction: Instruction,
    response: Response,
    gateway: Gateway,
    annotator_model: str,
) -> AnnotationRecord:
    """Probability-weighted expected score over the digit tokens 0-9.

    The point-wise prompt is issued with token distributions requested;
    digits absent from the backend's top-K are excluded and the softmax is
    renormalized over the digits present.
    """
    spec = StrategySpec.for_strategy(Strategy.SINGLE_BASIC)
    request = _score_request(
        spec, instruction, [response], annotator_model, want_token_distribution=True
    )
    result = gateway.complete(request)
    if result.token_distribution is None:
        raise NoDigitPosition("backend returned no token distribution")
    distribution = digits_from_positions(result.token_distribution)
    score = distribution.expected_score()
    raw_text = json.dumps(
        {"text": result.text, "digit_log_scores": dict(sorted(distribution.digit_scores.items()))},
        ensure_ascii=False,
        sort_keys=True,
    )
    run = RawRun(OrderVariant.NA, 0, score, raw_text)
    return AnnotationRecord.from_runs(
        response.id, Strategy.SINGLE_BASIC, ScoringMethod.PROB, [run], annotator_model
    )


@dataclass(frozen=True)
class RejectedAnnotation:
    instruction_id: str
    response_ids: tuple[str, ...]
    reason: str

    def to_payload(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "response_ids": list(self.response_ids),
            "reason": self.reason,
        }


def _pair_plan(
    responses: Sequence[Response],
    pairing_plan: Sequence[tuple[str, str]] | None,
) -> list[tuple[Response, Response]]:
    by_id = {r.id: r for r in responses}
    if pairing_plan is not None:
        return [(by_id[a], by_id[b]) for a, b in pairing_plan]
    ordered = sorted(responses, key=lambda r: r.id)
    return [(a, b) for i, a in enumerate(ordered) for b in ordered[i + 1 :]]


def annotate_set(
    instructions: Sequence[Instruction],
    responses: Sequence[Response],
    spec: StrategySpec,
    method: ScoringMethod,
    gateway: Gateway,
    annotator_model: str,
    n_runs: int = DEFAULT_AVG_RUNS,
    question_model: str = DEFAULT_QUESTION_MODEL,
    pairing_plan: Mapping[str, Sequence[tuple[str, str]]] | None = None,
    max_workers: int | None = None,
) -> tuple[list[AnnotationRecord], list[RejectedAnnotation]]:
    """Annotate every response under one (strategy, method) configuration.

    Output order is deterministic (sorted by instruction id, then response
    id) regardless of gateway completion order. Per-record failures are
    isolated: they produce reject entries, never silent drops. Pairwise
    strategies evaluate all unordered pairs per instruction unless a pairing
    plan overrides; each response's final score is the mean of its per-pair
    order-averaged scores.
    """
    if spec.pairwise and method is not ScoringMethod.GREEDY:
        raise ValueError("Avg and Prob scoring are defined for point-wise annotation only")

    inst_by_id = {i.id: i for i in instructions}
    grouped: dict[str, list[Response]] = {}
    for response in responses:
        if response.instruction_id not in inst_by_id:
            raise ValueError(f"response {response.id} references unknown instruction")
        grouped.setdefault(response.instruction_id, []).append(response)

    records: list[AnnotationRecord] = []
    rejects: list[RejectedAnnotation] = []
    workers = max_workers if max_workers is not None else gateway.config.max_in_flight

    if spec.pairwise:
        for iid in sorted(grouped):
            recs, rejs = _annotate_pairwise_instruction(
                inst_by_id[iid],
                grouped[iid],
                spec,
                gateway,
                annotator_model,
                question_model,
                None if pairing_plan is None else pairing_plan.get(iid),
                workers,
            )
            records.extend(recs)
            rejects.extend(rejs)
    else:
        units = [
            (iid, resp)
            for iid in sorted(grouped)
            for resp in sorted(grouped[iid], key=lambda r: r.id)
        ]

        def run_unit(unit):
            iid, resp = unit
            instruction = inst_by_id[iid]
            if method is ScoringMethod.GREEDY:
                return score_greedy(spec, instruction, [resp], gateway, annotator_model)[0]
            if method is ScoringMethod.AVG:
                return score_avg(instruction, resp, gateway, annotator_model, n_runs)
            return score_prob(instruction, resp, gateway, annotator_model)

        outcomes = _map_concurrently(run_unit, units, workers)
        for (iid, resp), outcome in zip(units, outcomes):
            if isinstance(outcome, Exception):
                logger.warning("annotation failed for %s: %s", resp.id, outcome)
                rejects.append(RejectedAnnotation(iid, (resp.id,), str(outcome)))
            else:
                records.append(outcome)

    instruction_of = {r.id: r.instruction_id for r in responses}
    records.sort(key=lambda r: (instruction_of.get(r.response_id, ""), r.response_id))
    return records, rejects


def _map_concurrently(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [_capture(fn, item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: _capture(fn, item), items))


def _capture(fn, item):
    try:
        return fn(item)
    except AnnotationError as exc:
        return exc
    except Exception as exc:  # gateway errors carry through with context
        return AnnotationError(f"{type(exc).__name__}: {exc}")


def _annotate_pairwise_instruction(
    instruction: Instruction,
    responses: Sequence[Response],
    spec: StrategySpec,
    gateway: Gateway,
    annotator_model: str,
    question_model: str,
    pairing_plan: Sequence[tuple[str, str]] | None,
    workers: int,
) -> tuple[list[AnnotationRecord], list[RejectedAnnotation]]:
    rejects: list[RejectedAnnotation] = []
    questions = None
    if spec.guideline is Guideline.FINE_GRAINED:
        try:
            questions = generate_questions(instruction, question_model, gateway)
        except Exception as exc:
            return [], [
                RejectedAnnotation(
                    instruction.id, tuple(sorted(r.id for r in responses)), str(exc)
                )
            ]

    pairs = _pair_plan(responses, pairing_plan)

    def run_pair(pair):
        first, second = pair
        return score_greedy(spec, instruction, [first, second], gateway, annotator_model, questions)

    outcomes = _map_concurrently(run_pair, pairs, workers)

    per_response_runs: dict[str, list[RawRun]] = {r.id: [] for r in responses}
    failed_ids: set[str] = set()
    for (first, second), outcome in zip(pairs, outcomes):
        if isinstance(outcome, Exception):
            logger.warning(
                "pair (%s, %s) failed for %s: %s", first.id, second.id, instruction.id, outcome
            )
            rejects.append(
                RejectedAnnotation(instruction.id, (first.id, second.id), str(outcome))
            )
            failed_ids.update((first.id, second.id))
            continue
        for record in outcome:
            per_response_runs[record.response_id].extend(record.raw_runs)

    records = []
    for response in sorted(responses, key=lambda r: r.id):
        runs = per_response_runs[response.id]
        if not runs:
            if response.id not in failed_ids:
                rejects.append(
                    RejectedAnnotation(instruction.id, (response.id,), "no pair evaluations")
                )
            continue
        renumbered = [
            RawRun(run.order_variant, idx, run.parsed_score, run.raw_text)
            for idx, run in enumerate(runs)
        ]
        records.append(
            AnnotationRecord.from_runs(
                response.id, spec.strategy, ScoringMethod.GREEDY, renumbered, annotator_model
            )
        )
    return records, rejects
