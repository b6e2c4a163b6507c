import math

import numpy as np
import pytest

from entropy_dynamics.env import bandit, default_suite, evaluate_policy, sample_batch
from entropy_dynamics.errors import DomainError, NumericError, ValidationError
from entropy_dynamics.policy import SoftmaxPolicy, entropy_gradient, state_entropy
from entropy_dynamics.updaters import (
    Schedule,
    TokenCovariance,
    UpdateBatch,
    UpdateRule,
    anneal_beta,
    apply_clip_cov,
    apply_update,
    compute_base_update,
    compute_entropy_reg_update,
    compute_kl_cov_update,
    compute_update,
    select_clip_set,
    select_kl_set,
    token_covariance,
)

# hand evaluation of C = (log pi - mu)(dz - mu_dz) at p = (0.8, 0.2), dz = pi * A, A = (0.25, -1)
TOKEN_C_08_02 = (0.02218070977791825, 0.35489135644669206)


def flat_cov(values):
    c = np.atleast_2d(np.asarray(values, dtype=np.float64))
    S = c.shape[0]
    return TokenCovariance(values=c, mean_log_prob=np.zeros(S), mean_delta=np.zeros(S), state_cov=np.zeros(S))


def two_arm(p1, rewards=(1.0, 0.0)):
    pol = SoftmaxPolicy.from_probabilities([[p1, 1 - p1]])
    return pol, evaluate_policy(bandit(rewards), pol)


def test_rule_fields_are_exclusive():
    with pytest.raises(ValidationError):
        UpdateRule("vanilla", 0.1, alpha=0.1)
    with pytest.raises(ValidationError):
        UpdateRule("entropy_reg", 0.1, alpha=0.1, beta=1.0)
    with pytest.raises(ValidationError):
        UpdateRule.entropy_reg(-0.1)
    with pytest.raises(ValidationError):
        UpdateRule.clip_cov(clip_ratio=1.0)
    with pytest.raises(ValidationError):
        UpdateRule.clip_cov(0.1, omega_low=2.0, omega_high=1.0)
    with pytest.raises(ValidationError):
        UpdateRule.kl_cov(select_fraction=0.0)
    with pytest.raises(ValidationError):
        UpdateRule.vanilla(learning_rate=0.0)
    assert UpdateRule.kl_cov().schedule == Schedule()


def test_base_update_examples():
    pol, table = two_arm(0.5)
    upd = compute_base_update(pol, table, 0.1)
    np.testing.assert_allclose(upd.deltas, [[0.025, -0.025]], atol=1e-17)
    zero = evaluate_policy(bandit([0.4, 0.4, 0.4]), SoftmaxPolicy([[0.1, 2.0, -1.0]]))
    np.testing.assert_allclose(compute_base_update(SoftmaxPolicy([[0.1, 2.0, -1.0]]), zero, 0.3).deltas, 0.0, atol=1e-15)


def test_sampled_mode_needs_batch():
    pol, table = two_arm(0.5)
    with pytest.raises(ValidationError):
        compute_base_update(pol, table, 0.1, mode="sampled")


@pytest.mark.parametrize("task_name", ["bandit10", "chain3"])
def test_sampled_update_is_unbiased(task_name):
    task = default_suite()[task_name]
    pol = SoftmaxPolicy(np.random.default_rng(4).normal(size=(task.num_states, task.num_actions)))
    table = evaluate_policy(task, pol)
    exact = compute_base_update(pol, table, 0.1).deltas
    # per-trajectory contributions give the standard error of the batch mean
    batch = sample_batch(task, pol, 10**5, rng_seed=17)
    M, H = batch.num_trajectories, batch.horizon
    S, A = pol.logits.shape
    per = np.zeros((M, S, A))
    probs = pol.probabilities()
    onehot = np.eye(A)[batch.actions]
    contrib = batch.advantage_estimate[:, None] * (onehot - probs[batch.states])
    np.add.at(per, (batch.trajectory_id, batch.states), contrib)
    per *= 0.1 / H
    mean = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(M)
    sampled = compute_base_update(pol, table, 0.1, mode="sampled", batch=batch).deltas
    np.testing.assert_allclose(sampled, mean, atol=1e-15)
    visited = se > 0
    assert np.all(np.abs(sampled - exact)[visited] <= 3.5 * se[visited])
    np.testing.assert_allclose(sampled[~visited], exact[~visited], atol=1e-15)


def test_entropy_reg_update():
    pol, table = two_arm(0.8)
    base = compute_base_update(pol, table, 0.1)
    assert np.array_equal(compute_entropy_reg_update(pol, table, 0.1, 0.0).deltas, base.deltas)
    uni, utable = two_arm(0.5)
    np.testing.assert_allclose(
        compute_entropy_reg_update(uni, utable, 0.1, 3.0).deltas, compute_base_update(uni, utable, 0.1).deltas, atol=1e-17
    )
    with pytest.raises(DomainError):
        compute_entropy_reg_update(pol, table, 0.1, -1.0)


def test_entropy_reg_pure_bonus_is_entropy_gradient():
    pol, table = two_arm(0.8, rewards=(0.5, 0.5))
    upd = compute_entropy_reg_update(pol, table, 1.0, 1.0)
    np.testing.assert_allclose(upd.deltas[0], entropy_gradient(pol, 0), atol=1e-16)
    h = 1e-6
    fd = [
        (state_entropy(SoftmaxPolicy(pol.logits + h * e), 0) - state_entropy(SoftmaxPolicy(pol.logits - h * e), 0)) / (2 * h)
        for e in np.eye(2)[:, None, :]
    ]
    np.testing.assert_allclose(upd.deltas[0], fd, atol=1e-9)


def test_token_covariance_examples():
    uni, utable = two_arm(0.5)
    tc = token_covariance(uni, compute_base_update(uni, utable, 0.1))
    np.testing.assert_allclose(tc.values, 0.0, atol=1e-18)
    pol, _ = two_arm(0.8)
    const = UpdateBatch(np.full((1, 2), 0.7), pol)
    np.testing.assert_allclose(token_covariance(pol, const).values, 0.0, atol=1e-16)
    # A = (0.25, -1) is centered under (0.8, 0.2): reward (1.25, 0) at p = 0.8 gives exactly that
    pol, table = two_arm(0.8, rewards=(1.25, 0.0))
    np.testing.assert_allclose(table.advantages[0], [0.25, -1.0], atol=1e-15)
    tc = token_covariance(pol, compute_base_update(pol, table, 1.0))
    np.testing.assert_allclose(tc.values[0], TOKEN_C_08_02, atol=1e-15)


def test_token_covariance_mean_is_state_covariance():
    rng = np.random.default_rng(8)
    task = default_suite()["chain3"]
    pol = SoftmaxPolicy(rng.normal(size=(3, 4)))
    upd = compute_base_update(pol, evaluate_policy(task, pol), 0.5)
    tc = token_covariance(pol, upd)
    p = pol.probabilities()
    logp = pol.log_probabilities()
    for s in range(3):
        mx, my = p[s] @ logp[s], p[s] @ upd.deltas[s]
        assert tc.state_cov[s] == pytest.approx(p[s] @ ((logp[s] - mx) * (upd.deltas[s] - my)), abs=1e-12)
    single = token_covariance(pol, upd, state=1)
    np.testing.assert_array_equal(single.values[0], tc.values[1])


def test_select_clip_set():
    c = flat_cov(np.linspace(-1, 1, 100))
    assert select_clip_set(c, 5.0, 6.0, 0.1, 0) == ()
    eligible = select_clip_set(c, 0.9, 1.0, 0.5, 0)
    assert len(eligible) == 5
    rng = np.random.default_rng(1)
    values = rng.normal(size=100)
    lo, hi = np.sort(values)[60], np.inf
    first = select_clip_set(flat_cov(values), lo, hi, 0.1, 42)
    again = select_clip_set(flat_cov(values), lo, hi, 0.1, 42)
    assert first == again and len(first) == 10
    assert all(values[a] >= lo for _, a in first)
    with pytest.raises(ValidationError):
        select_clip_set(flat_cov(values), lo, hi, 0.0, 1)


def test_select_kl_set():
    assert select_kl_set(flat_cov([0.5] * 10), 0.25) == ((0, 0), (0, 1), (0, 2))
    assert select_kl_set(flat_cov([0.003, 5.654, 0.001]), 0.33) == ((0, 1),)
    # ceil(0.34 * 3) = 2: the two largest magnitudes
    assert select_kl_set(flat_cov([0.003, 5.654, 0.001]), 0.34) == ((0, 0), (0, 1))
    rng = np.random.default_rng(2)
    c = rng.normal(size=(3, 7))
    got = select_kl_set(flat_cov(c), 0.2)
    order = sorted(range(21), key=lambda i: (-abs(c.ravel()[i]), i))[: math.ceil(0.2 * 21)]
    assert got == tuple(sorted((i // 7, i % 7) for i in order))


def test_apply_clip_cov():
    pol = SoftmaxPolicy(np.zeros((2, 3)))
    upd = UpdateBatch(np.arange(6.0).reshape(2, 3) + 1, pol)
    assert apply_clip_cov(upd, ()) is upd
    everything = [(s, a) for s in range(2) for a in range(3)]
    np.testing.assert_array_equal(apply_clip_cov(upd, everything).deltas, 0.0)
    one = apply_clip_cov(upd, [(1, 2)])
    assert one.deltas[1, 2] == 0.0 and one.selected_clip == ((1, 2),)
    mask = np.ones((2, 3), bool)
    mask[1, 2] = False
    np.testing.assert_array_equal(one.deltas[mask], upd.deltas[mask])


def test_kl_cov_update_examples():
    pol, table = two_arm(0.9, rewards=(0.5, 0.5))
    old = SoftmaxPolicy.from_probabilities([[0.8, 0.2]])
    upd = compute_kl_cov_update(pol, old, table, 0.1, 1.0, [(0, 0)])
    assert upd.deltas[0, 0] == pytest.approx(-0.01, abs=1e-15)
    assert upd.deltas[0, 1] == pytest.approx(0.0, abs=1e-18)
    base = compute_base_update(pol, table, 0.1)
    assert np.array_equal(compute_kl_cov_update(pol, old, table, 0.1, 0.0, [(0, 0)]).deltas, base.deltas)
    same = compute_kl_cov_update(pol, pol, table, 0.1, 1.0, [(0, 0), (0, 1)])
    assert np.array_equal(same.deltas, base.deltas)
    with pytest.raises(ValidationError):
        compute_kl_cov_update(pol, SoftmaxPolicy.uniform(1, 3), table, 0.1, 1.0, [])


def test_anneal_beta():
    assert anneal_beta(2.0, 12345) == 2.0
    s = Schedule("inverse_time", 100)
    assert anneal_beta(2.0, 100, s) == 1.0
    assert anneal_beta(1.0, 10**6, s) <= 1e-4
    with pytest.raises(DomainError):
        Schedule("inverse_time", 0)
    with pytest.raises(DomainError):
        anneal_beta(1.0, -1)


def test_apply_update():
    pol = SoftmaxPolicy([[0.3, -0.2, 1.0]])
    same = apply_update(pol, UpdateBatch(np.zeros((1, 3)), pol))
    np.testing.assert_allclose(same.probabilities(), pol.probabilities(), atol=1e-12)
    shifted = apply_update(pol, UpdateBatch(np.full((1, 3), 4.2), pol))
    np.testing.assert_allclose(shifted.probabilities(), pol.probabilities(), atol=1e-12)
    assert pol.logits[0, 0] == 0.3
    uni, table = two_arm(0.5)
    up = apply_update(uni, compute_base_update(uni, table, 0.1))
    assert up.probabilities()[0, 0] > 0.5
    bad = UpdateBatch.__new__(UpdateBatch)
    object.__setattr__(bad, "deltas", np.array([[np.nan, 0.0, 0.0]]))
    with pytest.raises(NumericError):
        apply_update(pol, bad)


def test_rule_consistency_bit_identical():
    task = default_suite()["bandit10"]
    pol = SoftmaxPolicy(np.random.default_rng(6).normal(size=(1, 10)))
    old = SoftmaxPolicy(np.random.default_rng(7).normal(size=(1, 10)))
    table = evaluate_policy(task, pol)
    van = compute_update(UpdateRule.vanilla(0.2), pol, table).update.deltas
    reg = compute_update(UpdateRule.entropy_reg(0.0, 0.2), pol, table).update.deltas
    kl = compute_update(UpdateRule.kl_cov(0.3, 0.0, learning_rate=0.2), pol, table, policy_old=old).update.deltas
    clip = compute_update(UpdateRule.clip_cov(0.01, learning_rate=0.2), pol, table).update.deltas  # floor(0.1) = 0
    for other in (reg, kl, clip):
        assert np.array_equal(van, other)


def test_small_step_lowers_entropy_when_covariance_positive():
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(50):
        task = bandit(rng.uniform(0, 1, size=6))
        pol = SoftmaxPolicy(rng.normal(size=(1, 6)))
        table = evaluate_policy(task, pol)
        if token_covariance(pol, compute_base_update(pol, table, 1.0)).state_cov[0] <= 0:
            continue
        eta = 1.0
        while state_entropy(apply_update(pol, compute_base_update(pol, table, eta)), 0) >= state_entropy(pol, 0):
            eta /= 2
            assert eta > 1e-12
        checked += 1
    assert checked > 10


def test_clip_cov_dispatch_records_selection():
    task = default_suite()["bandit10"]
    z = np.zeros((1, 10))
    z[0, 7] = 2.0
    pol = SoftmaxPolicy(z)
    res = compute_update(UpdateRule.clip_cov(0.3, omega_low=-np.inf, omega_high=np.inf), pol, evaluate_policy(task, pol), rng_seed=3)
    assert len(res.update.selected_clip) == 3
    for s, a in res.update.selected_clip:
        assert res.update.deltas[s, a] == 0.0
