"""Instruction filtering and bucketing: length, score variance, quality tags, turns."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

from .gateway import ChatMessage, ChatRequest, Gateway
from .model import Instruction, ScoreEntry, ScoredSet

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 4096
DEFAULT_JUDGE_MODELS = ("Llama-3.1-70B-Instruct", "Qwen2.5-72B-Instruct")
MAX_TOKENS_TAG_REPLY = 32

VARIANCE_LOW_MAX = 1.5
VARIANCE_MID_MAX = 3.0


class SelectionError(Exception):
    pass


class TooFewResponses(SelectionError):
    pass


class TagParseFailure(SelectionError):
    pass


class VarianceBucket(str, Enum):
    LOW = "Low"
    MID = "Mid"
    HIGH = "High"

    @classmethod
    def classify(cls, variance: float) -> "VarianceBucket":
        if variance < 0:
            raise ValueError("variance must be nonnegative")
        if variance <= VARIANCE_LOW_MAX:
            return cls.LOW
        if variance <= VARIANCE_MID_MAX:
            return cls.MID
        return cls.HIGH


QUALITY_LEVELS = {
    "very poor": 1,
    "poor": 2,
    "average": 3,
    "good": 4,
    "excellent": 5,
}


@dataclass(frozen=True)
class QualityTag:
    instruction_id: str
    per_annotator: Mapping[str, int]
    mean_score: float

    def to_payload(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "per_annotator": dict(self.per_annotator),
            "mean_score": self.mean_score,
        }


def length_filter(
    instructions: Sequence[Instruction],
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> tuple[list[Instruction], list[dict]]:
    """Keep instructions whose token count fits the context budget (boundary inclusive)."""
    kept = []
    dropped = []
    for inst in instructions:
        if inst.token_len <= max_tokens:
            kept.append(inst)
        else:
            dropped.append({"id": inst.id, "token_len": inst.token_len})
    return kept, dropped


def population_variance(scores: Sequence[float]) -> float:
    """Population variance (divide by N), evaluated in exact rational arithmetic.

    Exact evaluation keeps the result bitwise translation-invariant whenever
    the shifted inputs themselves are exact (integer scores shifted by
    integers), which float two-pass formulas do not guarantee.
    """
    if not scores:
        raise ValueError("no scores")
    values = [Fraction(s) for s in scores]
    n = len(values)
    mean = sum(values) / n
    return float(sum((v - mean) ** 2 for v in values) / n)


def compute_variance(instruction_id: str, entries: Sequence[ScoreEntry]) -> ScoredSet:
    """ScoredSet for one instruction; needs at least two scored responses."""
    if len(entries) < 2:
        raise TooFewResponses(
            f"{instruction_id}: need >= 2 scored responses, got {len(entries)}"
        )
    variance = population_variance([e.score for e in entries])
    return ScoredSet(
        instruction_id=instruction_id,
        entries=tuple(entries),
        variance=variance,
    )


def select_by_variance(
    scored_sets: Sequence[ScoredSet],
    bucket: VarianceBucket | str,
) -> list[str]:
    """Instruction ids in the bucket, sorted by (variance ascending, id)."""
    bucket = VarianceBucket(bucket)
    chosen = [s for s in scored_sets if VarianceBucket.classify(s.variance) is bucket]
    chosen.sort(key=lambda s: (s.variance, s.instruction_id))
    return [s.instruction_id for s in chosen]


_TAG_LINE_RE = re.compile(r"^.*Dialog quality:\s*\[?([A-Za-z ]+?)\]?\s*$", re.MULTILINE)


def parse_quality_level(reply_text: str) -> int:
    matches = _TAG_LINE_RE.findall(reply_text)
    candidates = [m.strip().lower() for m in matches]
    if not candidates:
        # Some judges answer with the bare level name.
        candidates = [reply_text.strip().strip(".").lower()]
    level = candidates[-1]
    if level not in QUALITY_LEVELS:
        raise TagParseFailure(f"unknown quality level {level!r}")
    return QUALITY_LEVELS[level]


def _tag_request(instruction: Instruction, judge_model: str) -> ChatRequest:
    from .annotation import load_template, render_history

    prompt = load_template("instag_quality.txt").rstrip("\n").format(
        conversation_history=render_history(instruction.turns)
    )
    return ChatRequest(
        model_id=judge_model,
        messages=(ChatMessage(role="user", text=prompt),),
        temperature=0.0,
        max_tokens=MAX_TOKENS_TAG_REPLY,
    )


def instag_quality(
    instruction: Instruction,
    gateway: Gateway,
    judge_models: Sequence[str] = DEFAULT_JUDGE_MODELS,
) -> QualityTag:
    """Rate dialogue quality 1-5 with each judge model and average the levels."""
    if not judge_models:
        raise ValueError("need at least one judge model")
    per_annotator: dict[str, int] = {}
    for judge in judge_models:
        request = _tag_request(instruction, judge)
        result = gateway.complete(request)
        try:
            per_annotator[judge] = parse_quality_level(result.text)
        except TagParseFailure:
            retry = gateway.complete(request)
            per_annotator[judge] = parse_quality_level(retry.text)
    mean_score = sum(per_annotator.values()) / len(per_annotator)
    return QualityTag(
        instruction_id=instruction.id,
        per_annotator=per_annotator,
        mean_score=mean_score,
    )


def split_by_turns(
    instructions: Sequence[Instruction],
) -> dict[str, list[Instruction]]:
    """Exhaustive, disjoint split into single-turn and multi-turn contexts."""
    single = [i for i in instructions if len(i.turns) == 1]
    multi = [i for i in instructions if len(i.turns) >= 2]
    return {"single_turn": single, "multi_turn": multi}
