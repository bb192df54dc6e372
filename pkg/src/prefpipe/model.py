"""Core data model: instructions, responses, annotations, scored sets, preference pairs.

All entities are immutable dataclasses with content-hash ids, so re-running a
pipeline stage on the same inputs reproduces the same records byte for byte.
Stage files are JSON Lines (UTF-8, one entity per line) with a top-level
``kind`` discriminator.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence


class Policy(str, Enum):
    ON = "OnPolicy"
    OFF = "OffPolicy"


class Strategy(str, Enum):
    SINGLE_BASIC = "SingleBasic"
    PAIR_BASIC = "PairBasic"
    PAIR_GUIDED = "PairGuided"
    PAIR_EXPLAINED = "PairExplained"
    PAIR_GUIDED_EXPLAINED = "PairGuidedExplained"
    PAIR_GUIDED_EXPLAINED_FG = "PairGuidedExplainedFG"


class ScoringMethod(str, Enum):
    GREEDY = "Greedy"
    AVG = "Avg"
    PROB = "Prob"


class OrderVariant(str, Enum):
    FORWARD = "Forward"
    REVERSED = "Reversed"
    NA = "NA"


class MixTag(str, Enum):
    """Policy of the chosen response followed by policy of the rejected one."""

    ON_ON = "OnOn"
    ON_OFF = "OnOff"
    OFF_ON = "OffOn"
    OFF_OFF = "OffOff"


ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"

# Deterministic fallback tokenizer: words and punctuation marks count as one
# token each. Exact counts only gate the context-length filter, so an
# approximate, reproducible count with a recorded method label is enough.
TOKENIZER_LABEL = "whitespace-punct-v1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def heuristic_token_count(text: str) -> int:
    return len(_TOKEN_RE.findall(text))


def _short_hash(data: str) -> str:
    return hashlib.sha256(data.encode("utf-8")).hexdigest()[:16]


def instruction_id_for(turns: Sequence["Turn"]) -> str:
    """Content-hash id for an instruction (stable across re-runs)."""
    blob = json.dumps([[t.role, t.text] for t in turns], ensure_ascii=False)
    return "i-" + _short_hash(blob)


def response_id_for(instruction_id: str, model_id: str, text: str) -> str:
    return "r-" + _short_hash("\x1f".join((instruction_id, model_id, text)))


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def to_payload(self) -> dict:
        return {"role": self.role, "text": self.text}

    @classmethod
    def from_payload(cls, payload: Mapping) -> "Turn":
        return cls(role=str(payload["role"]), text=str(payload["text"]))


@dataclass(frozen=True)
class Instruction:
    """A conversation context: zero or more history turns plus the final user query."""

    id: str
    turns: tuple[Turn, ...]
    source: str
    token_len: int

    @classmethod
    def from_turns(
        cls,
        turns: Sequence[Turn],
        source: str,
        token_len: int | None = None,
    ) -> "Instruction":
        if token_len is None:
            token_len = sum(heuristic_token_count(t.text) for t in turns)
        return cls(
            id=instruction_id_for(turns),
            turns=tuple(turns),
            source=source,
            token_len=token_len,
        )

    @property
    def query(self) -> str:
        """Text of the final user turn."""
        return self.turns[-1].text

    @property
    def history(self) -> tuple[Turn, ...]:
        return self.turns[:-1]

    def to_payload(self) -> dict:
        return {
            "id": self.id,
            "turns": [t.to_payload() for t in self.turns],
            "source": self.source,
            "token_len": self.token_len,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "Instruction":
        return cls(
            id=str(payload["id"]),
            turns=tuple(Turn.from_payload(t) for t in payload["turns"]),
            source=str(payload["source"]),
            token_len=int(payload["token_len"]),
        )


@dataclass(frozen=True)
class Response:
    """One candidate completion for an instruction."""

    id: str
    instruction_id: str
    model_id: str
    policy: Policy
    text: str
    token_len: int
    sampling_temperature: float

    @classmethod
    def from_text(
        cls,
        instruction_id: str,
        model_id: str,
        policy: Policy,
        text: str,
        sampling_temperature: float,
        token_len: int | None = None,
    ) -> "Response":
        if token_len is None:
            token_len = heuristic_token_count(text)
        return cls(
            id=response_id_for(instruction_id, model_id, text),
            instruction_id=instruction_id,
            model_id=model_id,
            policy=policy,
            text=text,
            token_len=token_len,
            sampling_temperature=sampling_temperature,
        )

    def to_payload(self) -> dict:
        return {
            "id": self.id,
            "instruction_id": self.instruction_id,
            "model_id": self.model_id,
            "policy": self.policy.value,
            "text": self.text,
            "token_len": self.token_len,
            "sampling_temperature": self.sampling_temperature,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "Response":
        return cls(
            id=str(payload["id"]),
            instruction_id=str(payload["instruction_id"]),
            model_id=str(payload["model_id"]),
            policy=Policy(payload["policy"]),
            text=str(payload["text"]),
            token_len=int(payload["token_len"]),
            sampling_temperature=float(payload["sampling_temperature"]),
        )


@dataclass(frozen=True)
class RawRun:
    """One judge call's contribution to a response score.

    ``parsed_score`` is the per-response value extracted from that call (for
    pairwise prompts, the slot belonging to this response).
    """

    order_variant: OrderVariant
    run_index: int
    parsed_score: float
    raw_text: str

    def to_payload(self) -> dict:
        return {
            "order_variant": self.order_variant.value,
            "run_index": self.run_index,
            "parsed_score": self.parsed_score,
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "RawRun":
        return cls(
            order_variant=OrderVariant(payload["order_variant"]),
            run_index=int(payload["run_index"]),
            parsed_score=float(payload["parsed_score"]),
            raw_text=str(payload["raw_text"]),
        )


def aggregate_runs(raw_runs: Sequence[RawRun]) -> float:
    """Recompute a record score from its raw runs.

    Every scoring method reduces to the arithmetic mean of per-run parsed
    scores: Greedy has one run, Avg averages its runs, and pairwise
    reversed-order averaging contributes exactly two runs per pair membership,
    so the mean of pair means equals the grand mean.
    """
    if not raw_runs:
        raise ValueError("cannot aggregate an empty run list")
    return sum(r.parsed_score for r in raw_runs) / len(raw_runs)


@dataclass(frozen=True)
class AnnotationRecord:
    """Per-response score with full provenance."""

    response_id: str
    strategy: Strategy
    scoring_method: ScoringMethod
    score: float
    raw_runs: tuple[RawRun, ...]
    annotator_model: str

    @classmethod
    def from_runs(
        cls,
        response_id: str,
        strategy: Strategy,
        scoring_method: ScoringMethod,
        raw_runs: Sequence[RawRun],
        annotator_model: str,
    ) -> "AnnotationRecord":
        return cls(
            response_id=response_id,
            strategy=strategy,
            scoring_method=scoring_method,
            score=aggregate_runs(raw_runs),
            raw_runs=tuple(raw_runs),
            annotator_model=annotator_model,
        )

    def to_payload(self) -> dict:
        return {
            "response_id": self.response_id,
            "strategy": self.strategy.value,
            "scoring_method": self.scoring_method.value,
            "score": self.score,
            "raw_runs": [r.to_payload() for r in self.raw_runs],
            "annotator_model": self.annotator_model,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "AnnotationRecord":
        return cls(
            response_id=str(payload["response_id"]),
            strategy=Strategy(payload["strategy"]),
            scoring_method=ScoringMethod(payload["scoring_method"]),
            score=float(payload["score"]),
            raw_runs=tuple(RawRun.from_payload(r) for r in payload["raw_runs"]),
            annotator_model=str(payload["annotator_model"]),
        )


@dataclass(frozen=True)
class ScoreEntry:
    response_id: str
    score: float

    def to_payload(self) -> dict:
        return {"response_id": self.response_id, "score": self.score}

    @classmethod
    def from_payload(cls, payload: Mapping) -> "ScoreEntry":
        return cls(response_id=str(payload["response_id"]), score=float(payload["score"]))


@dataclass(frozen=True)
class ScoredSet:
    """All annotated responses for one instruction, with their score variance."""

    instruction_id: str
    entries: tuple[ScoreEntry, ...]
    variance: float

    def to_payload(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "entries": [e.to_payload() for e in self.entries],
            "variance": self.variance,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "ScoredSet":
        return cls(
            instruction_id=str(payload["instruction_id"]),
            entries=tuple(ScoreEntry.from_payload(e) for e in payload["entries"]),
            variance=float(payload["variance"]),
        )


@dataclass(frozen=True)
class PreferencePair:
    """A (chosen, rejected) response pair, the unit of the exported dataset."""

    instruction_id: str
    chosen_id: str
    rejected_id: str
    chosen_score: float
    rejected_score: float
    margin: float
    mix: MixTag

    def to_payload(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "chosen_id": self.chosen_id,
            "rejected_id": self.rejected_id,
            "chosen_score": self.chosen_score,
            "rejected_score": self.rejected_score,
            "margin": self.margin,
            "mix": self.mix.value,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "PreferencePair":
        return cls(
            instruction_id=str(payload["instruction_id"]),
            chosen_id=str(payload["chosen_id"]),
            rejected_id=str(payload["rejected_id"]),
            chosen_score=float(payload["chosen_score"]),
            rejected_score=float(payload["rejected_score"]),
            margin=float(payload["margin"]),
            mix=MixTag(payload["mix"]),
        )


StageRecord = Instruction | Response | AnnotationRecord | ScoredSet | PreferencePair

KIND_INSTRUCTION = "instruction"
KIND_RESPONSE = "response"
KIND_ANNOTATION = "annotation"
KIND_SCORED_SET = "scored_set"
KIND_PAIR = "pair"

_KIND_TO_TYPE: dict[str, type] = {
    KIND_INSTRUCTION: Instruction,
    KIND_RESPONSE: Response,
    KIND_ANNOTATION: AnnotationRecord,
    KIND_SCORED_SET: ScoredSet,
    KIND_PAIR: PreferencePair,
}

_TYPE_TO_KIND = {t: k for k, t in _KIND_TO_TYPE.items()}


def kind_of(record: StageRecord) -> str:
    return _TYPE_TO_KIND[type(record)]


def record_id(record: StageRecord) -> str:
    """Identifier used for reporting; annotations and sets key on their references."""
    if isinstance(record, (Instruction, Response)):
        return record.id
    if isinstance(record, AnnotationRecord):
        return record.response_id
    if isinstance(record, ScoredSet):
        return record.instruction_id
    return f"{record.instruction_id}/{record.chosen_id}>{record.rejected_id}"


def to_stage_line(record: StageRecord) -> str:
    payload = {"kind": kind_of(record), **record.to_payload()}
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def parse_stage_line(line: str) -> StageRecord:
    payload = json.loads(line)
    if not isinstance(payload, dict):
        raise ValueError("stage line is not a JSON object")
    kind = payload.get("kind")
    if kind not in _KIND_TO_TYPE:
        raise ValueError(f"unknown record kind: {kind!r}")
    return _KIND_TO_TYPE[kind].from_payload(payload)


def write_stage_file(path: str | Path, records: Iterable[StageRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(to_stage_line(record))
            fh.write("\n")


def read_stage_file(path: str | Path) -> list[StageRecord]:
    """Strict reader: raises on the first malformed line."""
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parse_stage_line(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return records


def read_stage_file_lenient(path: str | Path) -> tuple[list[StageRecord], list[str]]:
    """Lenient reader: malformed lines come back as error strings, never dropped."""
    records: list[StageRecord] = []
    errors: list[str] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parse_stage_line(line))
            except (ValueError, KeyError, TypeError) as exc:
                errors.append(f"line {lineno}: {exc}")
    return records, errors


def iter_stage_records(paths: Iterable[str | Path]) -> Iterator[StageRecord]:
    for path in paths:
        yield from read_stage_file(path)
