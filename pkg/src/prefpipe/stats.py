"""Dataset statistics and annotation-consistency measures.

Histograms bin fractional values by floor (the bin rule is recorded in the
report). Consistency between annotation strategies is measured on induced
preference orderings rather than raw score equality, since strategies differ
in scale and granularity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .model import (
    AnnotationRecord,
    Instruction,
    PreferencePair,
    Response,
    ScoredSet,
)

VARIANCE_BIN_WIDTH = 0.5


class StatsError(Exception):
    pass


class NoOverlap(StatsError):
    pass


@dataclass
class StatsReport:
    dataset_size: int
    margin_hist: dict[int, int]
    score_hist: dict[int, int]
    length_by_score: dict[int, float]
    variance_hist: dict[float, int]
    per_model: dict[str, dict[str, float]]
    binning: dict[str, str] = field(
        default_factory=lambda: {
            "margin": "floor",
            "score": "floor",
            "variance": f"width-{VARIANCE_BIN_WIDTH}",
        }
    )

    def to_payload(self) -> dict:
        return {
            "dataset_size": self.dataset_size,
            "margin_hist": {str(k): v for k, v in sorted(self.margin_hist.items())},
            "score_hist": {str(k): v for k, v in sorted(self.score_hist.items())},
            "length_by_score": {
                str(k): v for k, v in sorted(self.length_by_score.items())
            },
            "variance_hist": {
                f"{k:.1f}": v for k, v in sorted(self.variance_hist.items())
            },
            "per_model": {k: dict(v) for k, v in sorted(self.per_model.items())},
            "binning": dict(self.binning),
        }

    def write_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_payload(), fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv_tables(self, directory: str | Path) -> list[Path]:
        """One CSV per histogram, for external plotting."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        tables = {
            "margin_hist.csv": (("margin_bin", "count"), sorted(self.margin_hist.items())),
            "score_hist.csv": (("score_bin", "count"), sorted(self.score_hist.items())),
            "length_by_score.csv": (
                ("score_bin", "mean_token_len"),
                sorted(self.length_by_score.items()),
            ),
            "variance_hist.csv": (
                ("variance_bin", "count"),
                sorted(self.variance_hist.items()),
            ),
            "per_model.csv": (
                ("model_id", "mean_len", "mean_score"),
                [
                    (model, vals["mean_len"], vals["mean_score"])
                    for model, vals in sorted(self.per_model.items())
                ],
            ),
        }
        for name, (header, rows) in tables.items():
            path = directory / name
            with path.open("w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
            written.append(path)
        return written


def compute_stats(
    instructions: Sequence[Instruction],
    responses: Sequence[Response],
    annotations: Sequence[AnnotationRecord],
    scored_sets: Sequence[ScoredSet] = (),
    pairs: Sequence[PreferencePair] = (),
) -> StatsReport:
    resp_by_id = {r.id: r for r in responses}

    margin_hist: dict[int, int] = {}
    for pair in pairs:
        b = int(math.floor(pair.margin))
        margin_hist[b] = margin_hist.get(b, 0) + 1

    score_hist: dict[int, int] = {}
    length_sums: dict[int, list[float]] = {}
    per_model_lens: dict[str, list[int]] = {}
    per_model_scores: dict[str, list[float]] = {}

    for record in annotations:
        b = int(math.floor(record.score))
        score_hist[b] = score_hist.get(b, 0) + 1
        response = resp_by_id.get(record.response_id)
        if response is not None:
            length_sums.setdefault(b, []).append(response.token_len)
            per_model_scores.setdefault(response.model_id, []).append(record.score)

    for response in responses:
        per_model_lens.setdefault(response.model_id, []).append(response.token_len)

    length_by_score = {
        b: sum(lens) / len(lens) for b, lens in length_sums.items()
    }

    variance_hist: dict[float, int] = {}
    for sset in scored_sets:
        b = math.floor(sset.variance / VARIANCE_BIN_WIDTH) * VARIANCE_BIN_WIDTH
        variance_hist[b] = variance_hist.get(b, 0) + 1

    per_model: dict[str, dict[str, float]] = {}
    for model_id, lens in per_model_lens.items():
        entry = {"mean_len": sum(lens) / len(lens)}
        scores = per_model_scores.get(model_id)
        if scores:
            entry["mean_score"] = sum(scores) / len(scores)
        else:
            entry["mean_score"] = float("nan")
        per_model[model_id] = entry

    return StatsReport(
        dataset_size=len(pairs),
        margin_hist=margin_hist,
        score_hist=score_hist,
        length_by_score=length_by_score,
        variance_hist=variance_hist,
        per_model=per_model,
    )


@dataclass(frozen=True)
class AgreementCell:
    agreement: float | None
    compared: int
    agreements: int
    tie_vs_order: int
    both_tie_excluded: int

    def to_payload(self) -> dict:
        return {
            "agreement": self.agreement,
            "compared": self.compared,
            "agreements": self.agreements,
            "tie_vs_order": self.tie_vs_order,
            "both_tie_excluded": self.both_tie_excluded,
        }


def _ordering(score_a: float, score_b: float) -> int:
    if score_a > score_b:
        return 1
    if score_a < score_b:
        return -1
    return 0


def strategy_consistency(
    annotations_by_strategy: Mapping[str, Sequence[AnnotationRecord]],
    responses: Sequence[Response],
) -> dict[str, dict[str, AgreementCell]]:
    """Pairwise ordering-agreement matrix across annotation strategies.

    For each strategy pair, every within-instruction response pair scored by
    both contributes one comparison: agreement when both induce the same
    strict order, disagreement when they order oppositely or one ties while
    the other orders; pairs tied under both are excluded from the denominator
    (the exclusion count is reported).
    """
    if len(annotations_by_strategy) < 2:
        raise ValueError("need at least two strategies to compare")
    instruction_of = {r.id: r.instruction_id for r in responses}

    score_maps: dict[str, dict[str, float]] = {}
    for name, records in annotations_by_strategy.items():
        score_maps[name] = {rec.response_id: rec.score for rec in records}

    grouped: dict[str, list[str]] = {}
    for response in sorted(responses, key=lambda r: r.id):
        grouped.setdefault(response.instruction_id, []).append(response.id)

    names = sorted(annotations_by_strategy)
    matrix: dict[str, dict[str, AgreementCell]] = {n: {} for n in names}
    for i, name_a in enumerate(names):
        for name_b in names[i:]:
            cell = _compare_pairwise(score_maps[name_a], score_maps[name_b], grouped)
            matrix[name_a][name_b] = cell
            matrix[name_b][name_a] = cell
    return matrix


def _compare_pairwise(
    scores_a: Mapping[str, float],
    scores_b: Mapping[str, float],
    grouped: Mapping[str, Sequence[str]],
) -> AgreementCell:
    shared = set(scores_a) & set(scores_b)
    if not shared:
        raise NoOverlap("strategies share no scored responses")

    compared = agreements = tie_vs_order = both_tie = 0
    for ids in grouped.values():
        usable = [rid for rid in ids if rid in shared]
        for i, r1 in enumerate(usable):
            for r2 in usable[i + 1 :]:
                order_a = _ordering(scores_a[r1], scores_a[r2])
                order_b = _ordering(scores_b[r1], scores_b[r2])
                if order_a == 0 and order_b == 0:
                    both_tie += 1
                    continue
                compared += 1
                if order_a == 0 or order_b == 0:
                    tie_vs_order += 1
                elif order_a == order_b:
                    agreements += 1
    return AgreementCell(
        agreement=None if compared == 0 else agreements / compared,
        compared=compared,
        agreements=agreements,
        tie_vs_order=tie_vs_order,
        both_tie_excluded=both_tie,
    )


def consistency_payload(matrix: Mapping[str, Mapping[str, AgreementCell]]) -> dict:
    return {
        a: {b: cell.to_payload() for b, cell in row.items()}
        for a, row in matrix.items()
    }

