"""Preference math: logistic probability, implicit reward, loss, gradient, sanity."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prefpipe.dpo import (
    DpoBatch,
    DpoError,
    MissingEntry,
    TabularPolicy,
    apply_gradient_step,
    bt_probability,
    dpo_gradient,
    dpo_loss,
    finite_difference_gradient,
    implicit_reward,
    load_export_triples,
    max_relative_error,
    one_step_gap_improvements,
    reward_gap,
    sanity_check_export,
    sigmoid,
)

LN2 = math.log(2.0)


# --- independent oracles -----------------------------------------------------


def oracle_sigmoid(x: float) -> float:
    """Plain logistic definition, independent of the tanh-based implementation."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def oracle_loss(policy, reference, triples, beta):
    """Direct per-triple evaluation with math.log, no shared helpers."""
    values = []
    for iid, w, l in triples:
        u = beta * (
            (policy.log_probs[(iid, w)] - reference.log_probs[(iid, w)])
            - (policy.log_probs[(iid, l)] - reference.log_probs[(iid, l)])
        )
        values.append(math.log(1.0 + math.exp(-u)))
    return sum(values) / len(values)


def oracle_fd_gradient(policy, reference, batch, step=1e-5):
    """Naive central differences through an explicitly renormalized table."""

    def loss_of(logits):
        groups = {}
        for (iid, rid), z in logits.items():
            groups.setdefault(iid, []).append(((iid, rid), z))
        table = {}
        for entries in groups.values():
            zs = [z for _, z in entries]
            peak = max(zs)
            lse = peak + math.log(sum(math.exp(z - peak) for z in zs))
            for key, z in entries:
                table[key] = z - lse
        return oracle_loss(
            TabularPolicy(table), reference, batch.triples, batch.beta
        )

    base = dict(policy.log_probs)
    grad = {}
    for key in base:
        up = dict(base)
        down = dict(base)
        up[key] += step
        down[key] -= step
        grad[key] = (loss_of(up) - loss_of(down)) / (2 * step)
    return grad


def random_instance(rng, n_instructions=3, n_candidates=4, n_triples=6, beta=0.1):
    groups = {
        f"i{k}": [f"r{k}-{j}" for j in range(n_candidates)] for k in range(n_instructions)
    }
    reference = TabularPolicy.random(groups, rng)
    policy = TabularPolicy.from_logits(
        {key: lp + float(rng.uniform(-0.5, 0.5)) for key, lp in reference.log_probs.items()}
    )
    triples = []
    iids = sorted(groups)
    for _ in range(n_triples):
        iid = iids[int(rng.integers(len(iids)))]
        a, b = rng.choice(groups[iid], size=2, replace=False)
        triples.append((iid, str(a), str(b)))
    return policy, reference, DpoBatch(tuple(triples), beta=beta)


# --- logistic preference probability ----------------------------------------


def test_bt_equal_rewards_is_half():
    assert bt_probability(3.0, 3.0) == 0.5


def test_bt_ln3_is_three_quarters():
    assert abs(bt_probability(math.log(3.0), 0.0) - 0.75) <= 1e-12


def test_bt_saturates():
    assert bt_probability(50.0, 0.0) >= 1.0 - 1e-9
    assert bt_probability(0.0, 50.0) <= 1e-9


@given(st.floats(min_value=-80, max_value=80, allow_nan=False))
def test_bt_complement_sums_to_one(x):
    assert abs(bt_probability(x, 0.0) + bt_probability(0.0, x) - 1.0) <= 1e-12


@given(st.floats(min_value=-80, max_value=80, allow_nan=False))
def test_sigmoid_matches_plain_definition(x):
    assert abs(sigmoid(x) - oracle_sigmoid(x)) <= 1e-12


# --- implicit reward ---------------------------------------------------------


def _tiny_tables():
    groups = {"i": ["a", "b"]}
    reference = TabularPolicy.from_logits({("i", "a"): 0.0, ("i", "b"): -1.0})
    policy = TabularPolicy.from_logits({("i", "a"): 0.5, ("i", "b"): -1.0})
    return policy, reference


def test_reward_zero_when_policy_equals_reference():
    _, reference = _tiny_tables()
    assert implicit_reward(reference, reference, "i", "a", 0.1) == 0.0


def test_reward_linear_in_log_ratio():
    policy = TabularPolicy({("i", "a"): -0.5})
    reference = TabularPolicy({("i", "a"): -1.5})
    assert abs(implicit_reward(policy, reference, "i", "a", 0.1) - 0.1) <= 1e-15


def test_reward_scales_with_beta():
    policy, reference = _tiny_tables()
    one = implicit_reward(policy, reference, "i", "a", 0.1)
    two = implicit_reward(policy, reference, "i", "a", 0.2)
    assert abs(two - 2 * one) <= 1e-15


def test_missing_entry():
    policy, reference = _tiny_tables()
    with pytest.raises(MissingEntry):
        implicit_reward(policy, reference, "i", "zzz", 0.1)


# --- loss ---------------------------------------------------------------------


def test_loss_at_reference_is_ln2():
    _, reference = _tiny_tables()
    batch = DpoBatch((("i", "a", "b"),), beta=0.1)
    result = dpo_loss(reference, reference, batch)
    assert abs(result.loss - LN2) <= 1e-9
    assert all(abs(v - LN2) <= 1e-9 for v in result.per_triple)


def test_loss_saturates_toward_zero():
    policy = TabularPolicy({("i", "a"): 0.0, ("i", "b"): -200.0})
    reference = TabularPolicy({("i", "a"): -200.0, ("i", "b"): 0.0})
    batch = DpoBatch((("i", "a", "b"),), beta=1.0)
    assert dpo_loss(policy, reference, batch).loss <= 1e-12


def test_loss_single_triple_hand_value():
    # Log-ratios (0.3, -0.2) with beta 0.1: u = 0.05, loss = -log sigmoid(0.05).
    policy = TabularPolicy({("i", "a"): -0.7, ("i", "b"): -1.2})
    reference = TabularPolicy({("i", "a"): -1.0, ("i", "b"): -1.0})
    batch = DpoBatch((("i", "a", "b"),), beta=0.1)
    expected = -math.log(oracle_sigmoid(0.05))
    assert abs(dpo_loss(policy, reference, batch).loss - expected) <= 1e-12


def test_loss_matches_oracle_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(10):
        policy, reference, batch = random_instance(rng)
        mine = dpo_loss(policy, reference, batch).loss
        assert abs(mine - oracle_loss(policy, reference, batch.triples, batch.beta)) <= 1e-12


def test_loss_invariant_under_per_instruction_shift():
    rng = np.random.default_rng(11)
    policy, reference, batch = random_instance(rng)
    constants = {iid: 0.37 * (k + 1) for k, iid in enumerate(sorted(policy.groups()))}
    base = dpo_loss(policy, reference, batch).loss
    shifted = dpo_loss(policy.shifted(constants), reference.shifted(constants), batch).loss
    assert abs(base - shifted) <= 1e-9


def test_loss_monotone_in_log_ratios():
    policy, reference = _tiny_tables()
    batch = DpoBatch((("i", "a", "b"),), beta=0.1)
    base = dpo_loss(policy, reference, batch).loss
    better_chosen = TabularPolicy(
        {**policy.log_probs, ("i", "a"): policy.log_probs[("i", "a")] + 0.1}
    )
    worse_rejected = TabularPolicy(
        {**policy.log_probs, ("i", "b"): policy.log_probs[("i", "b")] + 0.1}
    )
    assert dpo_loss(better_chosen, reference, batch).loss < base
    assert dpo_loss(worse_rejected, reference, batch).loss > base


# --- gradient ----------------------------------------------------------------


def test_gradient_at_reference_pushes_chosen_up():
    _, reference = _tiny_tables()
    batch = DpoBatch((("i", "a", "b"),), beta=0.1)
    grad = dpo_gradient(reference, reference, batch, constrained=False)
    # Descent moves against the gradient: chosen negative, rejected positive,
    # equal magnitude beta * sigma(0) = 0.05.
    assert grad[("i", "a")] == -grad[("i", "b")]
    assert grad[("i", "a")] < 0
    assert abs(abs(grad[("i", "a")]) - 0.1 * 0.5) <= 1e-15


def test_zero_beta_gives_zero_gradient():
    policy, reference = _tiny_tables()
    batch = DpoBatch((("i", "a", "b"),), beta=0.0)
    grad = dpo_gradient(policy, reference, batch)
    assert all(v == 0.0 for v in grad.values())


def test_constrained_gradient_sums_to_zero_per_group():
    rng = np.random.default_rng(3)
    policy, reference, batch = random_instance(rng)
    grad = dpo_gradient(policy, reference, batch, constrained=True)
    for iid, rids in policy.groups().items():
        total = sum(grad[(iid, rid)] for rid in rids)
        assert abs(total) <= 1e-15


def test_gradient_matches_library_fd():
    rng = np.random.default_rng(5)
    policy, reference, batch = random_instance(rng)
    analytic = dpo_gradient(policy, reference, batch)
    numeric = finite_difference_gradient(policy, reference, batch)
    assert max_relative_error(analytic, numeric) <= 1e-5


def test_gradient_matches_independent_fd_oracle_many_instances():
    rng = np.random.default_rng(17)
    for trial in range(20):
        n_triples = int(rng.integers(1, 11))
        policy, reference, batch = random_instance(rng, n_triples=n_triples)
        analytic = dpo_gradient(policy, reference, batch)
        numeric = oracle_fd_gradient(policy, reference, batch)
        assert max_relative_error(analytic, numeric) <= 1e-5, f"trial {trial}"


def test_one_step_improves_every_triple_gap():
    rng = np.random.default_rng(23)
    policy, reference, batch = random_instance(rng, n_triples=10)
    improvements = one_step_gap_improvements(policy, reference, batch)
    assert all(improvements)


def test_one_step_gap_increase_hand_checked():
    policy, reference = _tiny_tables()
    batch = DpoBatch((("i", "a", "b"),), beta=0.1)
    grad = dpo_gradient(policy, reference, batch)
    stepped = apply_gradient_step(policy, grad, 1e-3)
    before = reward_gap(policy, reference, ("i", "a", "b"), 0.1)
    after = reward_gap(stepped, reference, ("i", "a", "b"), 0.1)
    assert after > before


def test_one_step_shortcut_matches_general_path():
    # The group-local fast path must agree with stepping the full table
    # through the general gradient/step/gap helpers.
    rng = np.random.default_rng(31)
    policy, reference, batch = random_instance(rng, n_triples=8)
    fast = one_step_gap_improvements(policy, reference, batch, learning_rate=1e-3)
    slow = []
    gaps_fast = []
    gaps_slow = []
    for triple in batch.triples:
        single = DpoBatch((triple,), beta=batch.beta)
        grad = dpo_gradient(policy, reference, single, constrained=True)
        stepped = apply_gradient_step(policy, grad, 1e-3)
        before = reward_gap(policy, reference, triple, batch.beta)
        after = reward_gap(stepped, reference, triple, batch.beta)
        slow.append(after > before)
        gaps_slow.append(after - before)
    assert fast == slow
    for triple, delta in zip(batch.triples, gaps_slow):
        # Analytic gap change: 2 * beta^2 * lr * sigmoid(-u).
        u = reward_gap(policy, reference, triple, batch.beta)
        expected = 2 * batch.beta**2 * 1e-3 * sigmoid(-u)
        assert abs(delta - expected) <= 1e-12


def test_policy_normalization_check():
    TabularPolicy.from_logits({("i", "a"): 3.0, ("i", "b"): -2.0}).validate_normalization()
    with pytest.raises(DpoError):
        TabularPolicy({("i", "a"): -0.1, ("i", "b"): -0.2}).validate_normalization()


def test_batch_rejects_negative_beta():
    with pytest.raises(ValueError):
        DpoBatch((("i", "a", "b"),), beta=-0.1)


# --- export sanity ------------------------------------------------------------


def _write_export(path, n_instructions=4, pairs_per=3):
    rows = []
    for k in range(n_instructions):
        prompt = [{"role": "user", "text": f"question {k}?"}]
        for j in range(pairs_per):
            rows.append(
                {
                    "prompt_turns": prompt,
                    "chosen_text": f"answer {k}-{j} good",
                    "rejected_text": f"answer {k}-{j} bad",
                    "meta": {"margin": 2.0, "chosen_score": 8.0, "mix": "OnOff",
                             "strategy_labels": {}},
                }
            )
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return len(rows)


def test_load_export_groups_by_prompt(tmp_path):
    path = tmp_path / "dpo.jsonl"
    count = _write_export(path, n_instructions=2, pairs_per=2)
    triples, groups = load_export_triples(path)
    assert len(triples) == count
    assert len(groups) == 2
    assert all(len(rids) == 4 for rids in groups.values())


def test_sanity_check_export_report(tmp_path):
    path = tmp_path / "dpo.jsonl"
    _write_export(path)
    report = sanity_check_export(path, seed=0)
    assert report["triples"] == 12
    assert abs(report["loss_at_ref"] - LN2) <= 1e-9
    assert report["loss_at_ref_max_dev"] <= 1e-9
    assert report["gradient_max_rel_error"] <= 1e-5
    assert report["gap_increase_fraction"] == 1.0


def test_sanity_check_is_seed_deterministic(tmp_path):
    path = tmp_path / "dpo.jsonl"
    _write_export(path)
    assert sanity_check_export(path, seed=4) == sanity_check_export(path, seed=4)


def test_sanity_check_empty_export_raises(tmp_path):
    path = tmp_path / "dpo.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(DpoError):
        sanity_check_export(path)


def test_sanity_handles_shared_responses_across_triples(tmp_path):
    # One chosen response reused against several rejected ones: the per-triple
    # step must still widen every gap.
    path = tmp_path / "dpo.jsonl"
    prompt = [{"role": "user", "text": "shared?"}]
    rows = [
        {
            "prompt_turns": prompt,
            "chosen_text": "the one good answer",
            "rejected_text": f"bad answer {j}",
            "meta": {"margin": 2.0, "chosen_score": 9.0, "mix": "OnOff",
                     "strategy_labels": {}},
        }
        for j in range(4)
    ]
    rows.append(
        {
            "prompt_turns": prompt,
            "chosen_text": "an even better answer",
            "rejected_text": "the one good answer",
            "meta": {"margin": 1.0, "chosen_score": 9.0, "mix": "OffOn",
                     "strategy_labels": {}},
        }
    )
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    report = sanity_check_export(path, seed=1)
    assert report["gap_increase_fraction"] == 1.0
