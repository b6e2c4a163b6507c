import itertools
import json
import math

import numpy as np
import pytest

from entropy_dynamics.env import (
    TabularTask,
    bandit,
    brute_force_optimum,
    default_suite,
    delayed_chain,
    evaluate_policy,
    expected_reward,
    load_task,
    optimal_value_dp,
    sample_batch,
    soft_bandit_optimum,
)
from entropy_dynamics.errors import CapacityError, DomainError, ValidationError
from entropy_dynamics.policy import SoftmaxPolicy

SOFT_P1_ALPHA_HALF = 0.8807970779778823  # 1 / (1 + e^-2)


def two_state_chain(distractor=0.3):
    """Horizon 2; action 0 moves 0 -> 1 with prob 0.8; reward 1 at (1, 0), ``distractor`` at (0, 1)."""
    trans = np.zeros((2, 2, 2))
    trans[0, 0] = [0.2, 0.8]
    trans[0, 1] = [1.0, 0.0]
    trans[1, :, 1] = 1.0
    reward = np.array([[0.0, distractor], [1.0, 0.0]])
    return TabularTask(horizon=2, initial_dist=[1.0, 0.0], transition=trans, reward=reward)


def enumerate_paths(task, probs):
    """Every (s0, a0, s1, a1, ...) path with its probability and return."""
    S, A, H = task.num_states, task.num_actions, task.horizon
    for path in itertools.product(range(S), range(A), repeat=H):
        prob, ret = 1.0, 0.0
        for t in range(H):
            s, a = path[2 * t], path[2 * t + 1]
            prob *= task.initial_dist[s] if t == 0 else task.transition[path[2 * t - 2], path[2 * t - 1], s]
            prob *= probs[s, a]
            ret += task.reward[s, a]
        yield path, prob, ret


def enumerated_q(task, probs):
    S, A, H = task.num_states, task.num_actions, task.horizon
    num = np.zeros((S, A))
    den = np.zeros((S, A))
    for path, prob, _ in enumerate_paths(task, probs):
        for t in range(H):
            s, a = path[2 * t], path[2 * t + 1]
            togo = sum(task.reward[path[2 * u], path[2 * u + 1]] for u in range(t, H))
            num[s, a] += prob * togo
            den[s, a] += prob
    return num / den


def test_bandit_advantages_closed_form():
    task = bandit([1.0, 0.0])
    for p1 in (0.1, 0.5, 0.77):
        pol = SoftmaxPolicy.from_probabilities([[p1, 1 - p1]])
        table = evaluate_policy(task, pol)
        assert table.v_values[0] == pytest.approx(p1, abs=1e-15)
        np.testing.assert_allclose(table.advantages[0], [1 - p1, -p1], atol=1e-15)


def test_chain_q_matches_path_enumeration():
    task = two_state_chain()
    pol = SoftmaxPolicy([[0.4, -0.3], [1.0, 0.2]])
    probs = pol.probabilities()
    table = evaluate_policy(task, pol)
    np.testing.assert_allclose(table.q_values, enumerated_q(task, probs), atol=1e-12)
    j = sum(prob * ret for _, prob, ret in enumerate_paths(task, probs))
    assert table.expected_reward == pytest.approx(j, abs=1e-12)


def test_advantage_centering_and_occupancy():
    rng = np.random.default_rng(0)
    for task in default_suite().values():
        pol = SoftmaxPolicy(rng.normal(size=(task.num_states, task.num_actions)))
        table = evaluate_policy(task, pol)
        assert np.abs((pol.probabilities() * table.advantages).sum(axis=1)).max() <= 1e-10
        assert table.occupancy.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(table.advantages, table.q_values - table.v_values[:, None])


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        evaluate_policy(bandit([1.0, 0.0]), SoftmaxPolicy.uniform(1, 3))


def test_expected_reward_examples():
    task = bandit([1.0, 0.0])
    assert expected_reward(task, SoftmaxPolicy.uniform(1, 2)) == 0.5
    assert expected_reward(task, SoftmaxPolicy([[1e6, 0.0]])) == 1.0


def test_expected_reward_monte_carlo():
    task = two_state_chain()
    pol = SoftmaxPolicy([[0.4, -0.3], [1.0, 0.2]])
    batch = sample_batch(task, pol, 10**6, rng_seed=2024)
    per_traj = batch.returns.reshape(-1, task.horizon)[:, 0]
    se = per_traj.std() / math.sqrt(per_traj.size)
    assert abs(per_traj.mean() - expected_reward(task, pol)) <= 3 * se


def test_sample_batch_validation_and_determinism():
    task = default_suite()["chain3"]
    pol = SoftmaxPolicy(np.random.default_rng(1).normal(size=(3, 4)))
    with pytest.raises(ValidationError):
        sample_batch(task, pol, 0, rng_seed=1)
    a = sample_batch(task, pol, 50, rng_seed=99, advantage_mode="empirical")
    b = sample_batch(task, pol, 50, rng_seed=99, advantage_mode="empirical")
    for name in ("states", "actions", "log_prob_old", "advantage_estimate", "trajectory_id", "returns"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert np.all(a.log_prob_old <= 0)
    assert len(a.records) == 150


def test_sample_batch_frequency():
    pol = SoftmaxPolicy.from_probabilities([[0.7, 0.3]])
    batch = sample_batch(bandit([1.0, 0.0]), pol, 10**5, rng_seed=5)
    freq = np.mean(batch.actions == 0)
    assert abs(freq - 0.7) <= 3 * math.sqrt(0.7 * 0.3 / 10**5)


def test_exact_advantages_attached():
    task = default_suite()["chain3"]
    pol = SoftmaxPolicy(np.random.default_rng(2).normal(size=(3, 4)))
    batch = sample_batch(task, pol, 20, rng_seed=3)
    adv = evaluate_policy(task, pol).advantages
    np.testing.assert_array_equal(batch.advantage_estimate, adv[batch.states, batch.actions])


def test_brute_force_examples():
    assert brute_force_optimum(bandit([1.0, 0.0])) == (1.0, (0,))
    assert brute_force_optimum(bandit([0.3, 0.9, 0.5])) == (0.9, (1,))


def test_brute_force_chain_matches_value_iteration():
    # without the distractor the best stationary policy is also the best time-dependent one
    task = two_state_chain(distractor=0.0)
    best, actions = brute_force_optimum(task)
    assert best == pytest.approx(optimal_value_dp(task), abs=1e-12)
    assert best == pytest.approx(0.8, abs=1e-15)
    assert actions == (0, 0)


def test_brute_force_chain_with_distractor():
    # staying in state 0 at the last step makes time-dependent policies strictly better
    task = two_state_chain()
    probs_by_choice = {c: np.eye(2)[list(c)] for c in itertools.product(range(2), repeat=2)}
    enumerated = max(sum(pr * r for _, pr, r in enumerate_paths(task, p)) for p in probs_by_choice.values())
    assert brute_force_optimum(task)[0] == pytest.approx(enumerated, abs=1e-12)
    assert brute_force_optimum(task)[0] < optimal_value_dp(task)


def test_brute_force_guard():
    S, A = 7, 8  # 8^7 > 1e6
    task = TabularTask(1, np.full(S, 1 / S), np.full((S, A, S), 1 / S), np.zeros((S, A)))
    with pytest.raises(CapacityError):
        brute_force_optimum(task)


def test_soft_optimum():
    assert soft_bandit_optimum([1.0, 0.0], 0.5).probabilities[0] == pytest.approx(SOFT_P1_ALPHA_HALF, abs=1e-15)
    assert soft_bandit_optimum([1.0, 0.0], 0.5).expected_reward == pytest.approx(SOFT_P1_ALPHA_HALF, abs=1e-15)
    np.testing.assert_allclose(soft_bandit_optimum([1.0, 0.0], 1e9).probabilities, [0.5, 0.5], atol=1e-9)
    with pytest.raises(DomainError):
        soft_bandit_optimum([1.0, 0.0], 0.0)
    with pytest.raises(DomainError):
        soft_bandit_optimum([1.0, 0.0], -1.0)


def test_soft_optimum_beats_simplex_grid():
    alpha = 0.5
    best = soft_bandit_optimum([1.0, 0.0], alpha)
    objective = best.expected_reward + alpha * best.entropy
    p = np.arange(0, 1.0001, 1e-3)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.nan_to_num(p * np.log(p)) - np.nan_to_num((1 - p) * np.log(1 - p))
    assert np.all(p + alpha * h <= objective + 1e-15)


def test_task_validation():
    with pytest.raises(ValidationError):
        TabularTask(1, [1.0], np.full((1, 2, 1), 0.9), np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        TabularTask(1, [0.5], np.ones((1, 2, 1)), np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        bandit([101.0, 0.0])
    with pytest.raises(ValidationError):
        bandit([float("nan"), 0.0])
    with pytest.raises(ValidationError):
        TabularTask(0, [1.0], np.ones((1, 2, 1)), np.zeros((1, 2)))


def test_task_json_round_trip(tmp_path):
    task = delayed_chain()
    path = tmp_path / "chain.json"
    path.write_text(json.dumps(task.to_json()))
    loaded = load_task(path)
    np.testing.assert_array_equal(loaded.transition, task.transition)
    np.testing.assert_array_equal(loaded.reward, task.reward)
    assert loaded.horizon == 3


def test_task_json_rejects_unknown_keys():
    obj = bandit([1.0, 0.0]).to_json()
    obj["discount"] = 0.9
    with pytest.raises(ValidationError):
        TabularTask.from_json(obj)


def test_default_suite_shapes():
    suite = default_suite()
    assert suite["bandit2"].is_bandit and suite["bandit10"].num_actions == 10
    chain = suite["chain3"]
    assert (chain.num_states, chain.num_actions, chain.horizon) == (3, 4, 3)
