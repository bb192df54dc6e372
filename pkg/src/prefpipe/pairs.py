"""Preference-pair construction: mixing strategies, margin buckets, score tiers.

Candidate universes per mixing strategy (for the default 4 on-policy + 4
off-policy responses): all 6 off/off pairs, the 10 pairs over one designated
on-policy plus the 4 off-policy, the 4 pairs of the designated on-policy with
each off-policy, all 6 on/on pairs, and the 16 on-by-off pairs for each of the
two forced-orientation ablations.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model import (
    Instruction,
    MixTag,
    Policy,
    PreferencePair,
    Response,
)

MARGIN_MODERATE_MIN = 2.0
MARGIN_HIGH_MIN = 4.0
TIER_HIGH_MIN = 8.0
TIER_MID_MIN = 7.0
DEFAULT_PAIR_BUDGET = 4


class PairError(Exception):
    pass


class InsufficientResponses(PairError):
    pass


class EmptyIntersection(PairError):
    pass


class DanglingReference(PairError):
    pass


class MarginBucket(str, Enum):
    LOW = "Low"
    MODERATE = "Moderate"
    HIGH = "High"

    @classmethod
    def classify(cls, margin: float) -> "MarginBucket":
        if margin <= 0:
            raise ValueError("margin must be positive")
        if margin < MARGIN_MODERATE_MIN:
            return cls.LOW
        if margin < MARGIN_HIGH_MIN:
            return cls.MODERATE
        return cls.HIGH


class ScoreTier(str, Enum):
    HIGH = "High"
    MID = "Mid"
    LOW = "Low"

    @classmethod
    def classify(cls, chosen_score: float) -> "ScoreTier":
        if chosen_score >= TIER_HIGH_MIN:
            return cls.HIGH
        if chosen_score >= TIER_MID_MIN:
            return cls.MID
        return cls.LOW


class MixStrategy(str, Enum):
    PURE_OFF = "PureOff"
    LOW_MIX = "LowMix"
    MID_MIX = "MidMix"
    PURE_ON = "PureOn"
    ON_CHOSEN_OFF_REJECT = "OnChosenOffReject"
    OFF_CHOSEN_ON_REJECT = "OffChosenOnReject"


@dataclass(frozen=True)
class ScoredResponse:
    response: Response
    score: float

    @property
    def id(self) -> str:
        return self.response.id

    @property
    def policy(self) -> Policy:
        return self.response.policy


@dataclass(frozen=True)
class CandidatePair:
    """Unordered candidate; ablation strategies force the chosen side's policy."""

    first: ScoredResponse
    second: ScoredResponse
    forced_chosen_policy: Policy | None = None


def _designated_on_policy(on: Sequence[ScoredResponse]) -> ScoredResponse:
    # Highest score wins; ties break toward the lexicographically smallest id.
    return min(on, key=lambda s: (-s.score, s.id))


def candidate_pairs(
    scored: Sequence[ScoredResponse],
    strategy: MixStrategy | str,
) -> list[CandidatePair]:
    """Enumerate the strategy's candidate universe for one instruction."""
    strategy = MixStrategy(strategy)
    on = sorted((s for s in scored if s.policy is Policy.ON), key=lambda s: s.id)
    off = sorted((s for s in scored if s.policy is Policy.OFF), key=lambda s: s.id)

    def require(n_on: int, n_off: int) -> None:
        if len(on) < n_on or len(off) < n_off:
            raise InsufficientResponses(
                f"{strategy.value} needs >= {n_on} on-policy and >= {n_off} off-policy "
                f"responses, got {len(on)} and {len(off)}"
            )

    if strategy is MixStrategy.PURE_OFF:
        require(0, 2)
        return _all_pairs(off)
    if strategy is MixStrategy.PURE_ON:
        require(2, 0)
        return _all_pairs(on)
    if strategy is MixStrategy.LOW_MIX:
        require(1, 2)
        designated = _designated_on_policy(on)
        pool = sorted(off + [designated], key=lambda s: s.id)
        return _all_pairs(pool)
    if strategy is MixStrategy.MID_MIX:
        require(1, 1)
        designated = _designated_on_policy(on)
        return [CandidatePair(designated, o) for o in off]
    if strategy is MixStrategy.ON_CHOSEN_OFF_REJECT:
        require(1, 1)
        return [
            CandidatePair(a, b, forced_chosen_policy=Policy.ON) for a in on for b in off
        ]
    require(1, 1)
    return [CandidatePair(a, b, forced_chosen_policy=Policy.OFF) for a in on for b in off]


def _all_pairs(pool: Sequence[ScoredResponse]) -> list[CandidatePair]:
    return [
        CandidatePair(a, b) for i, a in enumerate(pool) for b in pool[i + 1 :]
    ]


def _mix_tag(chosen: ScoredResponse, rejected: ScoredResponse) -> MixTag:
    key = (chosen.policy is Policy.ON, rejected.policy is Policy.ON)
    return {
        (True, True): MixTag.ON_ON,
        (True, False): MixTag.ON_OFF,
        (False, True): MixTag.OFF_ON,
        (False, False): MixTag.OFF_OFF,
    }[key]


def orient_pair(candidate: CandidatePair) -> PreferencePair | None:
    """Chosen is the higher-scoring member; ties and orientation violations drop.

    For the forced-orientation ablations a pair belongs to the arm only when
    the required side actually scored higher, so violating pairs return None
    rather than being force-inverted.
    """
    first, second = candidate.first, candidate.second
    if first.score == second.score:
        return None
    chosen, rejected = (first, second) if first.score > second.score else (second, first)
    if (
        candidate.forced_chosen_policy is not None
        and chosen.policy is not candidate.forced_chosen_policy
    ):
        return None
    return PreferencePair(
        instruction_id=_shared_instruction(chosen, rejected),
        chosen_id=chosen.id,
        rejected_id=rejected.id,
        chosen_score=chosen.score,
        rejected_score=rejected.score,
        margin=chosen.score - rejected.score,
        mix=_mix_tag(chosen, rejected),
    )


def _shared_instruction(chosen: ScoredResponse, rejected: ScoredResponse) -> str:
    if chosen.response.instruction_id != rejected.response.instruction_id:
        raise PairError("pair members belong to different instructions")
    return chosen.response.instruction_id


def build_pairs(
    scored: Sequence[ScoredResponse],
    strategy: MixStrategy | str,
) -> tuple[list[PreferencePair], list[dict]]:
    """Candidates, oriented; returns (pairs, dropped-with-reasons)."""
    pairs = []
    dropped = []
    for candidate in candidate_pairs(scored, strategy):
        pair = orient_pair(candidate)
        if pair is None:
            reason = (
                "tie"
                if candidate.first.score == candidate.second.score
                else "forced orientation violated"
            )
            dropped.append(
                {
                    "instruction_id": candidate.first.response.instruction_id,
                    "response_ids": sorted([candidate.first.id, candidate.second.id]),
                    "reason": reason,
                }
            )
        else:
            pairs.append(pair)
    return pairs, dropped


def filter_pairs(
    pairs: Iterable[PreferencePair],
    margin_bucket: MarginBucket | str | None = None,
    score_tier: ScoreTier | str | None = None,
) -> list[PreferencePair]:
    """Keep pairs matching the configured buckets; both filters are optional and conjunctive."""
    margin_bucket = None if margin_bucket is None else MarginBucket(margin_bucket)
    score_tier = None if score_tier is None else ScoreTier(score_tier)
    kept = []
    for pair in pairs:
        if margin_bucket is not None and MarginBucket.classify(pair.margin) is not margin_bucket:
            continue
        if score_tier is not None and ScoreTier.classify(pair.chosen_score) is not score_tier:
            continue
        kept.append(pair)
    return kept


_BUCKET_ORDER = (MarginBucket.LOW, MarginBucket.MODERATE, MarginBucket.HIGH)


def _pair_sort_key(pair: PreferencePair):
    return (pair.instruction_id, pair.chosen_id, pair.rejected_id)


def _quotas(budget: int, hist: Mapping[MarginBucket | str, float]) -> dict[MarginBucket, int]:
    """Largest-remainder allocation of the budget across margin buckets."""
    weights = {MarginBucket(k): max(0.0, float(v)) for k, v in hist.items()}
    total = sum(weights.values())
    if total <= 0:
        raise ValueError("target margin histogram has no mass")
    exact = {b: budget * weights.get(b, 0.0) / total for b in _BUCKET_ORDER}
    quotas = {b: math.floor(exact[b]) for b in _BUCKET_ORDER}
    leftover = budget - sum(quotas.values())
    by_remainder = sorted(
        _BUCKET_ORDER,
        key=lambda b: (-(exact[b] - quotas[b]), _BUCKET_ORDER.index(b)),
    )
    for b in by_remainder[:leftover]:
        quotas[b] += 1
    return quotas


def sample_per_instruction(
    pairs: Sequence[PreferencePair],
    budget: int = DEFAULT_PAIR_BUDGET,
    rng_seed: int | str = 0,
    target_margin_hist: Mapping[MarginBucket | str, float] | None = None,
) -> tuple[list[PreferencePair], list[dict]]:
    """Select up to ``budget`` pairs per instruction, deterministically per seed.

    With a target margin histogram, per-bucket allocation follows
    largest-remainder rounding of the target proportions, falling back to the
    nearest available bucket when one is exhausted. Instructions that cannot
    fill the budget are reported as shortfalls.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    grouped: dict[str, list[PreferencePair]] = {}
    for pair in pairs:
        grouped.setdefault(pair.instruction_id, []).append(pair)

    selected: list[PreferencePair] = []
    shortfalls: list[dict] = []
    for iid in sorted(grouped):
        available = sorted(grouped[iid], key=_pair_sort_key)
        rng = random.Random(f"{rng_seed}:{iid}")
        if target_margin_hist is None:
            take = min(budget, len(available))
            chosen = rng.sample(available, take) if take < len(available) else list(available)
        else:
            chosen = _sample_with_hist(available, budget, target_margin_hist, rng)
        if len(chosen) < budget:
            shortfalls.append(
                {"instruction_id": iid, "requested": budget, "selected": len(chosen)}
            )
        selected.extend(sorted(chosen, key=_pair_sort_key))
    return selected, shortfalls


def _sample_with_hist(
    available: Sequence[PreferencePair],
    budget: int,
    hist: Mapping[MarginBucket | str, float],
    rng: random.Random,
) -> list[PreferencePair]:
    by_bucket: dict[MarginBucket, list[PreferencePair]] = {b: [] for b in _BUCKET_ORDER}
    for pair in available:
        by_bucket[MarginBucket.classify(pair.margin)].append(pair)

    quotas = _quotas(budget, hist)
    chosen: list[PreferencePair] = []
    deficits: dict[MarginBucket, int] = {}
    for bucket in _BUCKET_ORDER:
        pool = by_bucket[bucket]
        take = min(quotas[bucket], len(pool))
        picked = rng.sample(pool, take) if take < len(pool) else list(pool)
        chosen.extend(picked)
        for p in picked:
            pool.remove(p)
        deficits[bucket] = quotas[bucket] - take

    # Unfilled quota slots spill into the nearest bucket with pairs left.
    for bucket in _BUCKET_ORDER:
        for _ in range(deficits[bucket]):
            fallback = _nearest_available(bucket, by_bucket)
            if fallback is None:
                break
            pool = by_bucket[fallback]
            pick = pool[rng.randrange(len(pool))] if len(pool) > 1 else pool[0]
            pool.remove(pick)
            chosen.append(pick)
    return chosen


def _nearest_available(
    bucket: MarginBucket,
    by_bucket: Mapping[MarginBucket, Sequence[PreferencePair]],
) -> MarginBucket | None:
    origin = _BUCKET_ORDER.index(bucket)
    best = None
    best_distance = None
    for idx, other in enumerate(_BUCKET_ORDER):
        if not by_bucket[other]:
            continue
        distance = abs(idx - origin)
        if best_distance is None or distance < best_distance:
            best, best_distance = other, distance
    return best


def margin_bin(margin: float) -> int:
    """Integerized margin bin (floor) used for histogram matching and stats."""
    return int(math.floor(margin))


def margin_histogram(pairs: Iterable[PreferencePair]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for pair in pairs:
        hist[margin_bin(pair.margin)] = hist.get(margin_bin(pair.margin), 0) + 1
    return hist


def match_margin_distributions(
    arms: Mapping[str, Sequence[PreferencePair]],
    rng_seed: int | str = 0,
) -> dict[str, list[PreferencePair]]:
    """Downsample every arm to the per-bin histogram intersection.

    All arms end with identical integer-margin histograms; no arm gains
    pairs. Raises only when the intersection is empty overall.
    """
    if len(arms) < 2:
        raise ValueError("need at least two arms to match")
    hists = {name: margin_histogram(pairs) for name, pairs in arms.items()}
    bins = sorted(set().union(*[set(h) for h in hists.values()]))
    common = {b: min(h.get(b, 0) for h in hists.values()) for b in bins}
    if sum(common.values()) == 0:
        raise EmptyIntersection("margin histograms share no mass across arms")

    trimmed: dict[str, list[PreferencePair]] = {}
    for name in sorted(arms):
        by_bin: dict[int, list[PreferencePair]] = {}
        for pair in sorted(arms[name], key=_pair_sort_key):
            by_bin.setdefault(margin_bin(pair.margin), []).append(pair)
        kept: list[PreferencePair] = []
        for b in bins:
            pool = by_bin.get(b, [])
            quota = common[b]
            if quota == 0:
                continue
            rng = random.Random(f"{rng_seed}:{name}:{b}")
            picked = rng.sample(pool, quota) if quota < len(pool) else list(pool)
            kept.extend(picked)
        trimmed[name] = sorted(kept, key=_pair_sort_key)
    return trimmed


def balance_arm_sizes(
    arms: Mapping[str, Sequence[PreferencePair]],
    rng_seed: int | str = 0,
) -> dict[str, list[PreferencePair]]:
    """Uniform random downsampling of every arm to the smallest arm's size."""
    if not arms:
        return {}
    floor_size = min(len(pairs) for pairs in arms.values())
    balanced = {}
    for name in sorted(arms):
        pool = sorted(arms[name], key=_pair_sort_key)
        rng = random.Random(f"{rng_seed}:{name}")
        picked = rng.sample(pool, floor_size) if floor_size < len(pool) else pool
        balanced[name] = sorted(picked, key=_pair_sort_key)
    return balanced


def export_rows(
    pairs: Sequence[PreferencePair],
    instructions: Mapping[str, Instruction] | Sequence[Instruction],
    responses: Mapping[str, Response] | Sequence[Response],
    strategy_labels: Mapping[str, str | None] | None = None,
) -> list[dict]:
    """DPO training rows, stable-sorted by instruction id."""
    inst_by_id = (
        instructions
        if isinstance(instructions, Mapping)
        else {i.id: i for i in instructions}
    )
    resp_by_id = (
        responses if isinstance(responses, Mapping) else {r.id: r for r in responses}
    )
    rows = []
    for pair in sorted(pairs, key=lambda p: p.instruction_id):
        instruction = inst_by_id.get(pair.instruction_id)
        chosen = resp_by_id.get(pair.chosen_id)
        rejected = resp_by_id.get(pair.rejected_id)
        if instruction is None:
            raise DanglingReference(f"pair references missing instruction {pair.instruction_id}")
        if chosen is None or rejected is None:
            missing = pair.chosen_id if chosen is None else pair.rejected_id
            raise DanglingReference(f"pair references missing response {missing}")
        rows.append(
            {
                "prompt_turns": [t.to_payload() for t in instruction.turns],
                "chosen_text": chosen.text,
                "rejected_text": rejected.text,
                "meta": {
                    "margin": pair.margin,
                    "chosen_score": pair.chosen_score,
                    "mix": pair.mix.value,
                    "strategy_labels": dict(strategy_labels or {}),
                },
            }
        )
    return rows


def export_dpo(
    pairs: Sequence[PreferencePair],
    instructions: Mapping[str, Instruction] | Sequence[Instruction],
    responses: Mapping[str, Response] | Sequence[Response],
    path: str | Path,
    strategy_labels: Mapping[str, str | None] | None = None,
) -> int:
    """Write the DPO training file (JSONL); returns the number of rows."""
    rows = export_rows(pairs, instructions, responses, strategy_labels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    return len(rows)
