"""Pairwise-preference math on toy tabular policies.

Verifies exported datasets at desk scale: the logistic preference probability,
the policy/reference log-ratio reward, the preference loss with its analytic
gradient, and a sanity report that checks the loss value at the reference
point, the gradient against central finite differences, and that a one-step
update widens each triple's reward gap.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_BETA = 0.1
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_FD_STEP = 1e-5
NORMALIZATION_TOL = 1e-9
# Cap on entries probed by the finite-difference check inside sanity reports;
# full-table probing is quadratic and belongs in the test suite's small cases.
SANITY_FD_MAX_ENTRIES = 200


class DpoError(Exception):
    pass


class MissingEntry(DpoError):
    pass


def sigmoid(x: float) -> float:
    """Logistic function via tanh: stable for large |x| and exactly symmetric,
    so sigmoid(x) + sigmoid(-x) == 1 in floating point."""
    return 0.5 * (1.0 + math.tanh(0.5 * x))


def bt_probability(r_w: float, r_l: float) -> float:
    """Probability that the first reward's response is preferred."""
    return sigmoid(r_w - r_l)


Key = tuple[str, str]


@dataclass
class TabularPolicy:
    """Log-probability table over (instruction_id, response_id) entries.

    Entries within one instruction's candidate set normalize to 1; the table
    entries themselves are the parameters, with gradients taken through the
    softmax parameterization so the constraint is preserved.
    """

    log_probs: dict[Key, float]

    def __post_init__(self):
        self.log_probs = dict(self.log_probs)

    def groups(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = {}
        for iid, rid in sorted(self.log_probs):
            grouped.setdefault(iid, []).append(rid)
        return grouped

    def log_prob(self, instruction_id: str, response_id: str) -> float:
        try:
            return self.log_probs[(instruction_id, response_id)]
        except KeyError:
            raise MissingEntry(f"no entry for ({instruction_id}, {response_id})") from None

    def validate_normalization(self, tol: float = NORMALIZATION_TOL) -> None:
        for iid, rids in self.groups().items():
            total = sum(math.exp(self.log_probs[(iid, rid)]) for rid in rids)
            if abs(total - 1.0) > tol:
                raise DpoError(f"instruction {iid} normalizes to {total}, not 1")

    def shifted(self, constants: Mapping[str, float]) -> "TabularPolicy":
        """Add a per-instruction constant to every entry (no renormalization)."""
        return TabularPolicy(
            {
                (iid, rid): lp + constants.get(iid, 0.0)
                for (iid, rid), lp in self.log_probs.items()
            }
        )

    @classmethod
    def from_logits(cls, logits: Mapping[Key, float]) -> "TabularPolicy":
        """Normalize free logits into per-instruction log-probabilities."""
        grouped: dict[str, list[Key]] = {}
        for key in logits:
            grouped.setdefault(key[0], []).append(key)
        table: dict[Key, float] = {}
        for keys in grouped.values():
            values = np.array([logits[k] for k in keys], dtype=np.float64)
            lse = _logsumexp(values)
            for key, value in zip(keys, values):
                table[key] = float(value - lse)
        return cls(table)

    @classmethod
    def random(
        cls,
        groups: Mapping[str, Sequence[str]],
        rng: np.random.Generator,
        low: float = -5.0,
        high: float = 0.0,
    ) -> "TabularPolicy":
        logits = {
            (iid, rid): float(rng.uniform(low, high))
            for iid, rids in groups.items()
            for rid in rids
        }
        return cls.from_logits(logits)


def _logsumexp(values: np.ndarray) -> float:
    peak = float(np.max(values))
    return peak + float(np.log(np.sum(np.exp(values - peak))))


@dataclass(frozen=True)
class DpoBatch:
    triples: tuple[tuple[str, str, str], ...]
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    def validate_against(self, policy: TabularPolicy, reference: TabularPolicy) -> None:
        for iid, chosen, rejected in self.triples:
            for rid in (chosen, rejected):
                policy.log_prob(iid, rid)
                reference.log_prob(iid, rid)


def implicit_reward(
    policy: TabularPolicy,
    reference: TabularPolicy,
    instruction_id: str,
    response_id: str,
    beta: float,
) -> float:
    """Beta times the policy-to-reference log-ratio."""
    return beta * (
        policy.log_prob(instruction_id, response_id)
        - reference.log_prob(instruction_id, response_id)
    )


def _triple_logit(
    policy: TabularPolicy,
    reference: TabularPolicy,
    triple: tuple[str, str, str],
    beta: float,
) -> float:
    iid, chosen, rejected = triple
    ratio_w = policy.log_prob(iid, chosen) - reference.log_prob(iid, chosen)
    ratio_l = policy.log_prob(iid, rejected) - reference.log_prob(iid, rejected)
    return beta * (ratio_w - ratio_l)


@dataclass(frozen=True)
class DpoLossResult:
    loss: float
    per_triple: tuple[float, ...]


def dpo_loss(
    policy: TabularPolicy,
    reference: TabularPolicy,
    batch: DpoBatch,
) -> DpoLossResult:
    """Mean over triples of -log sigmoid(beta * (log-ratio gap))."""
    per_triple = []
    for triple in batch.triples:
        u = _triple_logit(policy, reference, triple, batch.beta)
        per_triple.append(float(np.logaddexp(0.0, -u)))
    loss = sum(per_triple) / len(per_triple) if per_triple else 0.0
    return DpoLossResult(loss=loss, per_triple=tuple(per_triple))


def dpo_gradient(
    policy: TabularPolicy,
    reference: TabularPolicy,
    batch: DpoBatch,
    constrained: bool = True,
) -> dict[Key, float]:
    """Analytic gradient of the batch loss with respect to the policy table.

    ``constrained=True`` returns the gradient through the softmax
    parameterization (projected onto the per-instruction simplex tangent),
    which is the direction that preserves normalization. ``constrained=False``
    returns raw per-entry derivatives without the constraint.
    """
    raw: dict[Key, float] = {key: 0.0 for key in policy.log_probs}
    m = len(batch.triples)
    if m == 0:
        return raw
    for triple in batch.triples:
        iid, chosen, rejected = triple
        u = _triple_logit(policy, reference, triple, batch.beta)
        weight = batch.beta * sigmoid(-u) / m
        raw[(iid, chosen)] = raw.get((iid, chosen), 0.0) - weight
        raw[(iid, rejected)] = raw.get((iid, rejected), 0.0) + weight
    if not constrained:
        return raw

    projected: dict[Key, float] = {}
    for iid, rids in policy.groups().items():
        keys = [(iid, rid) for rid in rids]
        log_pi = np.array([policy.log_probs[k] for k in keys], dtype=np.float64)
        probs = np.exp(log_pi - _logsumexp(log_pi))
        group_sum = sum(raw.get(k, 0.0) for k in keys)
        for key, prob in zip(keys, probs):
            projected[key] = raw.get(key, 0.0) - float(prob) * group_sum
    return projected


def finite_difference_gradient(
    policy: TabularPolicy,
    reference: TabularPolicy,
    batch: DpoBatch,
    step: float = DEFAULT_FD_STEP,
    keys: Sequence[Key] | None = None,
) -> dict[Key, float]:
    """Central finite differences of the softmax-parameterized loss.

    The current log-probabilities act as the free logits (valid because they
    are already normalized, and the parameterization is shift-invariant).
    Perturbing one entry only moves its own instruction group, so only that
    group's triples are re-evaluated; every other triple cancels exactly in
    the central difference.
    """
    base = dict(policy.log_probs)
    groups = policy.groups()
    triples_by_group: dict[str, list[tuple[str, str, str]]] = {}
    for triple in batch.triples:
        triples_by_group.setdefault(triple[0], []).append(triple)
    m = len(batch.triples)

    def group_loss_sum(iid: str, perturbed: Key, delta: float) -> float:
        zs = {rid: base[(iid, rid)] for rid in groups[iid]}
        zs[perturbed[1]] += delta
        values = np.array(list(zs.values()), dtype=np.float64)
        lse = _logsumexp(values)
        total = 0.0
        for _, chosen, rejected in triples_by_group[iid]:
            ratio_w = (zs[chosen] - lse) - reference.log_prob(iid, chosen)
            ratio_l = (zs[rejected] - lse) - reference.log_prob(iid, rejected)
            u = batch.beta * (ratio_w - ratio_l)
            total += float(np.logaddexp(0.0, -u))
        return total

    probe = list(base if keys is None else keys)
    grad: dict[Key, float] = {}
    for key in probe:
        iid = key[0]
        if m == 0 or iid not in triples_by_group:
            grad[key] = 0.0
            continue
        up = group_loss_sum(iid, key, step)
        down = group_loss_sum(iid, key, -step)
        grad[key] = (up - down) / (2.0 * step * m)
    return grad


def max_relative_error(
    analytic: Mapping[Key, float],
    numeric: Mapping[Key, float],
    floor: float = 1e-5,
) -> float:
    """Worst per-entry relative error, with an absolute guard for entries whose
    gradient is (near) zero, where a pure ratio would measure rounding noise."""
    worst = 0.0
    for key in numeric:
        a = analytic.get(key, 0.0)
        n = numeric[key]
        denom = max(abs(a), abs(n), floor)
        worst = max(worst, abs(a - n) / denom)
    return worst


def apply_gradient_step(
    policy: TabularPolicy,
    gradient: Mapping[Key, float],
    learning_rate: float,
) -> TabularPolicy:
    """Descend in logit space, then renormalize (exact under softmax params)."""
    logits = {
        key: lp - learning_rate * gradient.get(key, 0.0)
        for key, lp in policy.log_probs.items()
    }
    return TabularPolicy.from_logits(logits)


def reward_gap(
    policy: TabularPolicy,
    reference: TabularPolicy,
    triple: tuple[str, str, str],
    beta: float,
) -> float:
    iid, chosen, rejected = triple
    return implicit_reward(policy, reference, iid, chosen, beta) - implicit_reward(
        policy, reference, iid, rejected, beta
    )


def one_step_gap_improvements(
    policy: TabularPolicy,
    reference: TabularPolicy,
    batch: DpoBatch,
    learning_rate: float = DEFAULT_LEARNING_RATE,
) -> list[bool]:
    """Per triple: does one gradient step on that triple's own loss widen its gap?

    Each triple is stepped independently so the check reflects the gradient's
    direction for that preference, not cross-triple interference within the
    batch. A single triple's raw gradient sums to zero within its group, so
    the simplex-tangent projection is the raw gradient itself, and the group
    normalizer cancels inside the chosen-minus-rejected gap; the step and the
    gap are therefore evaluated group-locally.
    """
    improvements = []
    for triple in batch.triples:
        iid, chosen, rejected = triple
        before = _triple_logit(policy, reference, triple, batch.beta)
        weight = batch.beta * sigmoid(-before)
        z_w = policy.log_prob(iid, chosen) + learning_rate * weight
        z_l = policy.log_prob(iid, rejected) - learning_rate * weight
        after = batch.beta * (
            (z_w - reference.log_prob(iid, chosen)) - (z_l - reference.log_prob(iid, rejected))
        )
        improvements.append(after > before)
    return improvements


def _content_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_export_triples(path: str | Path) -> tuple[list[tuple[str, str, str]], dict[str, list[str]]]:
    """Read a DPO export file into triples plus per-instruction candidate groups."""
    triples: list[tuple[str, str, str]] = []
    groups: dict[str, set[str]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                prompt = json.dumps(row["prompt_turns"], ensure_ascii=False, sort_keys=True)
                iid = "x-" + _content_key(prompt)
                chosen = "y-" + _content_key(iid + "\x1f" + row["chosen_text"])
                rejected = "y-" + _content_key(iid + "\x1f" + row["rejected_text"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DpoError(f"{path}:{lineno}: malformed export row: {exc}") from exc
            triples.append((iid, chosen, rejected))
            groups.setdefault(iid, set()).update((chosen, rejected))
    return triples, {iid: sorted(rids) for iid, rids in groups.items()}


def sanity_check_export(
    path: str | Path,
    seed: int = 0,
    beta: float = DEFAULT_BETA,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    fd_step: float = DEFAULT_FD_STEP,
) -> dict:
    """Desk-scale verification of an exported preference dataset.

    Builds a random reference policy and a perturbed policy over the file's
    triples, then reports the loss at the reference point (must be ln 2 per
    triple), a finite-difference gradient check, and the fraction of triples
    whose implicit-reward gap widens after one per-triple gradient step
    (must be 1.0).
    """
    triples, groups = load_export_triples(path)
    if not triples:
        raise DpoError(f"{path}: export contains no triples")
    rng = np.random.default_rng(seed)
    reference = TabularPolicy.random(groups, rng)
    perturbed = TabularPolicy.from_logits(
        {
            key: lp + float(rng.uniform(-0.5, 0.5))
            for key, lp in reference.log_probs.items()
        }
    )
    batch = DpoBatch(triples=tuple(triples), beta=beta)

    at_ref = dpo_loss(reference, reference, batch)
    ln2 = math.log(2.0)
    loss_at_ref_max_dev = max(abs(v - ln2) for v in at_ref.per_triple)

    keys = sorted(perturbed.log_probs)
    if len(keys) > SANITY_FD_MAX_ENTRIES:
        idx = rng.choice(len(keys), size=SANITY_FD_MAX_ENTRIES, replace=False)
        keys = [keys[i] for i in sorted(idx)]
    analytic = dpo_gradient(perturbed, reference, batch, constrained=True)
    numeric = finite_difference_gradient(perturbed, reference, batch, fd_step, keys=keys)
    grad_err = max_relative_error(analytic, numeric)

    improvements = one_step_gap_improvements(perturbed, reference, batch, learning_rate)
    fraction = sum(improvements) / len(improvements)

    return {
        "triples": len(triples),
        "instructions": len(groups),
        "loss_at_ref": at_ref.loss,
        "loss_at_ref_max_dev": loss_at_ref_max_dev,
        "gradient_max_rel_error": grad_err,
        "gradient_entries_checked": len(keys),
        "gap_increase_fraction": fraction,
        "seed": seed,
        "beta": beta,
        "learning_rate": learning_rate,
        "fd_step": fd_step,
    }

