"""Dataset validation: every invariant violation is reported, never silently dropped."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .model import (
    AnnotationRecord,
    Instruction,
    MixTag,
    OrderVariant,
    Policy,
    PreferencePair,
    Response,
    ScoredSet,
    ScoringMethod,
    StageRecord,
    Strategy,
    aggregate_runs,
    read_stage_file_lenient,
    record_id,
)
from .selection import population_variance

_VALID_ROLES = ("user", "assistant")

_PAIRWISE = {
    Strategy.PAIR_BASIC,
    Strategy.PAIR_GUIDED,
    Strategy.PAIR_EXPLAINED,
    Strategy.PAIR_GUIDED_EXPLAINED,
    Strategy.PAIR_GUIDED_EXPLAINED_FG,
}


@dataclass(frozen=True)
class Violation:
    record_id: str
    rule: str
    message: str

    def to_payload(self) -> dict:
        return {"record_id": self.record_id, "rule": self.rule, "message": self.message}


@dataclass
class ValidationReport:
    counts: dict[str, int] = field(default_factory=dict)
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_payload(self) -> dict:
        return {
            "counts": dict(self.counts),
            "violations": [v.to_payload() for v in self.violations],
            "ok": self.ok,
        }


def _mix_for(chosen: Response, rejected: Response) -> MixTag:
    key = (chosen.policy is Policy.ON, rejected.policy is Policy.ON)
    return {
        (True, True): MixTag.ON_ON,
        (True, False): MixTag.ON_OFF,
        (False, True): MixTag.OFF_ON,
        (False, False): MixTag.OFF_OFF,
    }[key]


def validate_dataset(
    records: Iterable[StageRecord],
    extra_violations: Sequence[Violation] = (),
) -> ValidationReport:
    """Check every record of a staged bundle against its invariants.

    Returns all violations with record id and rule name; an empty violation
    list means the bundle is valid.
    """
    records = list(records)
    report = ValidationReport(
        counts={
            "instructions": 0,
            "responses": 0,
            "annotations": 0,
            "scored_sets": 0,
            "pairs": 0,
        },
        violations=list(extra_violations),
    )

    instructions: dict[str, Instruction] = {}
    responses: dict[str, Response] = {}

    def flag(record: StageRecord, rule: str, message: str) -> None:
        report.violations.append(Violation(record_id(record), rule, message))

    # First pass: index entities and catch duplicate ids.
    for record in records:
        if isinstance(record, Instruction):
            report.counts["instructions"] += 1
            if record.id in instructions:
                flag(record, "unique id", f"duplicate instruction id {record.id}")
            instructions[record.id] = record
        elif isinstance(record, Response):
            report.counts["responses"] += 1
            if record.id in responses:
                flag(record, "unique id", f"duplicate response id {record.id}")
            responses[record.id] = record
        elif isinstance(record, AnnotationRecord):
            report.counts["annotations"] += 1
        elif isinstance(record, ScoredSet):
            report.counts["scored_sets"] += 1
        elif isinstance(record, PreferencePair):
            report.counts["pairs"] += 1

    for record in records:
        if isinstance(record, Instruction):
            _check_instruction(record, flag)
        elif isinstance(record, Response):
            _check_response(record, instructions, flag)
        elif isinstance(record, AnnotationRecord):
            _check_annotation(record, responses, flag)
        elif isinstance(record, ScoredSet):
            _check_scored_set(record, responses, flag)
        elif isinstance(record, PreferencePair):
            _check_pair(record, responses, flag)

    return report


def _check_instruction(inst: Instruction, flag) -> None:
    if not inst.turns:
        flag(inst, "non-empty turns", "instruction has no turns")
        return
    if inst.turns[-1].role != "user":
        flag(inst, "final turn must be user", f"final turn role is {inst.turns[-1].role!r}")
    for turn in inst.turns:
        if turn.role not in _VALID_ROLES:
            flag(inst, "valid roles", f"unknown role {turn.role!r}")
    for prev, cur in zip(inst.turns, inst.turns[1:]):
        if prev.role == cur.role:
            flag(inst, "alternating roles", f"consecutive {cur.role!r} turns")
            break
    if inst.token_len < 1:
        flag(inst, "token_len >= 1", f"token_len is {inst.token_len}")


def _check_response(resp: Response, instructions: dict[str, Instruction], flag) -> None:
    if instructions and resp.instruction_id not in instructions:
        flag(resp, "instruction_id resolves", f"unknown instruction {resp.instruction_id}")
    if not resp.text:
        flag(resp, "non-empty text", "response text is empty")
    if resp.token_len < 0:
        flag(resp, "token_len >= 0", f"token_len is {resp.token_len}")
    if resp.sampling_temperature < 0:
        flag(resp, "temperature >= 0", f"temperature is {resp.sampling_temperature}")


def _check_annotation(rec: AnnotationRecord, responses: dict[str, Response], flag) -> None:
    if responses and rec.response_id not in responses:
        flag(rec, "response_id resolves", f"unknown response {rec.response_id}")
    if not 0.0 <= rec.score <= 9.0:
        flag(rec, "score in [0,9]", f"score is {rec.score}")
    if not rec.raw_runs:
        flag(rec, "raw runs present", "record has no raw runs")
        return
    for run in rec.raw_runs:
        if not 0.0 <= run.parsed_score <= 9.0:
            flag(rec, "run score in [0,9]", f"run {run.run_index} parsed {run.parsed_score}")
    if aggregate_runs(rec.raw_runs) != rec.score:
        flag(
            rec,
            "score recomputable from raw_runs",
            f"stored {rec.score} != recomputed {aggregate_runs(rec.raw_runs)}",
        )
    _check_run_structure(rec, flag)


def _check_run_structure(rec: AnnotationRecord, flag) -> None:
    n_fwd = sum(1 for r in rec.raw_runs if r.order_variant is OrderVariant.FORWARD)
    n_rev = sum(1 for r in rec.raw_runs if r.order_variant is OrderVariant.REVERSED)
    n_na = sum(1 for r in rec.raw_runs if r.order_variant is OrderVariant.NA)
    if rec.strategy in _PAIRWISE:
        if n_na or n_fwd != n_rev or n_fwd == 0:
            flag(
                rec,
                "forward/reversed couples",
                f"pairwise record has runs fwd={n_fwd} rev={n_rev} na={n_na}",
            )
    else:
        if n_fwd or n_rev:
            flag(rec, "single has no order", "single-response record carries ordered runs")
        if rec.scoring_method is ScoringMethod.GREEDY and len(rec.raw_runs) != 1:
            flag(rec, "greedy single run", f"{len(rec.raw_runs)} runs on a greedy record")


def _check_scored_set(sset: ScoredSet, responses: dict[str, Response], flag) -> None:
    if not sset.entries:
        flag(sset, "non-empty entries", "scored set has no entries")
        return
    if responses:
        for entry in sset.entries:
            resp = responses.get(entry.response_id)
            if resp is None:
                flag(sset, "entry resolves", f"unknown response {entry.response_id}")
            elif resp.instruction_id != sset.instruction_id:
                flag(
                    sset,
                    "entries belong to instruction",
                    f"{entry.response_id} belongs to {resp.instruction_id}",
                )
    if len(sset.entries) >= 2:
        expected = population_variance([e.score for e in sset.entries])
        if expected != sset.variance:
            flag(sset, "variance recomputable", f"stored {sset.variance} != {expected}")
    if sset.variance < 0:
        flag(sset, "variance >= 0", f"variance is {sset.variance}")


def _check_pair(pair: PreferencePair, responses: dict[str, Response], flag) -> None:
    if pair.chosen_id == pair.rejected_id:
        flag(pair, "distinct members", "chosen and rejected are the same response")
    if pair.margin <= 0:
        flag(pair, "margin > 0", f"margin is {pair.margin}")
    if pair.margin != pair.chosen_score - pair.rejected_score:
        flag(
            pair,
            "margin = chosen - rejected",
            f"margin {pair.margin} != {pair.chosen_score - pair.rejected_score}",
        )
    for score, label in ((pair.chosen_score, "chosen"), (pair.rejected_score, "rejected")):
        if not 0.0 <= score <= 9.0:
            flag(pair, "score in [0,9]", f"{label} score is {score}")
    if responses:
        chosen = responses.get(pair.chosen_id)
        rejected = responses.get(pair.rejected_id)
        for resp, rid in ((chosen, pair.chosen_id), (rejected, pair.rejected_id)):
            if resp is None:
                flag(pair, "member resolves", f"unknown response {rid}")
            elif resp.instruction_id != pair.instruction_id:
                flag(pair, "members belong to instruction", f"{rid} is from another instruction")
        if chosen is not None and rejected is not None:
            if _mix_for(chosen, rejected) is not pair.mix:
                flag(
                    pair,
                    "mix matches policies",
                    f"tagged {pair.mix.value}, policies say {_mix_for(chosen, rejected).value}",
                )


def validate_files(paths: Iterable[str | Path]) -> ValidationReport:
    """Load one or more stage files leniently and validate them as one bundle.

    Unreadable lines become violations with rule ``readable line``.
    """
    records: list[StageRecord] = []
    parse_violations: list[Violation] = []
    for path in paths:
        loaded, errors = read_stage_file_lenient(path)
        records.extend(loaded)
        for err in errors:
            parse_violations.append(Violation(str(path), "readable line", err))
    return validate_dataset(records, extra_violations=parse_violations)
