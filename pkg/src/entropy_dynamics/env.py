"""Exactly solvable tasks: one-step bandits and finite-horizon tabular MDPs.

Policies are stationary (one distribution per state, shared by all time
steps). Because a state can be visited at several time steps, the tables
returned by :func:`evaluate_policy` aggregate the time-indexed values with
the visitation probabilities as weights::

    Q(s, a) = sum_t d_t(s) Q_t(s, a) / sum_t d_t(s)

which is the every-visit action value. With ``occupancy = mean_t d_t`` the
exact policy gradient is ``dJ/dz[s, a] = H * occupancy(s) * pi(a|s) * A(s, a)``.

Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``),
whose output stream is fixed by its published algorithm and identical on all
platforms for a given integer seed.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, DomainError, ValidationError
from .policy import SoftmaxPolicy

DEFAULT_REWARD_BOUND = 100.0
BRUTE_FORCE_LIMIT = 10**6


@dataclass(frozen=True)
class TabularTask:
    """Finite-horizon MDP; ``horizon == 1`` with one state is a bandit."""

    horizon: int
    initial_dist: np.ndarray
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    reward_bound: float = DEFAULT_REWARD_BOUND
    name: str = ""

    def __post_init__(self):
        init = np.array(self.initial_dist, dtype=np.float64).ravel()
        trans = np.array(self.transition, dtype=np.float64)
        rew = np.array(self.reward, dtype=np.float64)
        if rew.ndim == 1:
            rew = rew[None, :]
        if rew.ndim != 2:
            raise ValidationError("reward must be a (states, actions) matrix", "task.reward")
        S, A = rew.shape
        if trans.shape != (S, A, S):
            raise ValidationError(f"transition shape {trans.shape} != {(S, A, S)}", "task.transition")
        if init.size != S:
            raise ValidationError(f"initial_dist has {init.size} entries for {S} states", "task.initial_dist")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValidationError("horizon must be an integer >= 1", "task.horizon")
        if np.any(init < 0) or abs(init.sum() - 1.0) > 1e-9:
            raise ValidationError("initial_dist must be a probability vector", "task.initial_dist")
        if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=2) - 1.0) > 1e-9):
            raise ValidationError("every transition row must be a probability vector", "task.transition")
        if not np.all(np.isfinite(rew)):
            raise ValidationError("rewards must be finite", "task.reward")
        if np.any(np.abs(rew) > self.reward_bound):
            raise ValidationError(f"|reward| exceeds bound {self.reward_bound}", "task.reward")
        for arr in (init, trans, rew):
            arr.setflags(write=False)
        object.__setattr__(self, "initial_dist", init)
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "reward", rew)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def is_bandit(self) -> bool:
        return self.num_states == 1 and self.horizon == 1

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict, name: str = "") -> "TabularTask":
        expected = {"num_states", "num_actions", "horizon", "initial_dist", "transition", "reward"}
        unknown = set(obj) - expected - {"name", "reward_bound"}
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", "task")
        missing = expected - set(obj)
        if missing:
            raise ValidationError(f"missing keys {sorted(missing)}", "task")
        S, A = int(obj["num_states"]), int(obj["num_actions"])
        trans = np.asarray(obj["transition"], dtype=np.float64)
        rew = np.asarray(obj["reward"], dtype=np.float64)
        if trans.size != S * A * S:
            raise ValidationError(f"expected {S * A * S} transition entries", "task.transition")
        if rew.size != S * A:
            raise ValidationError(f"expected {S * A} reward entries", "task.reward")
        return cls(
            horizon=obj["horizon"],
            initial_dist=obj["initial_dist"],
            transition=trans.reshape(S, A, S),
            reward=rew.reshape(S, A),
            reward_bound=float(obj.get("reward_bound", DEFAULT_REWARD_BOUND)),
            name=obj.get("name", name),
        )


def load_task(path) -> TabularTask:
    with open(path, encoding="utf-8") as fh:
        return TabularTask.from_json(json.load(fh), name=Path(path).stem)


def bandit(rewards, name: str = "") -> TabularTask:
    r = np.asarray(rewards, dtype=np.float64).ravel()
    A = r.size
    return TabularTask(
        horizon=1,
        initial_dist=[1.0],
        transition=np.ones((1, A, 1)),
        reward=r[None, :],
        name=name,
    )


def delayed_chain(advance_prob: float = 0.9, distractor: float = 0.1) -> TabularTask:
    """3 states, 4 actions, horizon 3.

    Action 0 advances one state (with probability ``advance_prob``), the
    others stay put. Reward 1 is paid only for action 0 in the last state,
    which is reachable only by advancing at both earlier steps. Action 1 in
    the first state pays a small immediate ``distractor`` reward.
    """
    S, A = 3, 4
    trans = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            if a == 0 and s < S - 1:
                trans[s, a, s + 1] = advance_prob
                trans[s, a, s] = 1.0 - advance_prob
            else:
                trans[s, a, s] = 1.0
    rew = np.zeros((S, A))
    rew[S - 1, 0] = 1.0
    rew[0, 1] = distractor
    return TabularTask(horizon=3, initial_dist=[1.0, 0.0, 0.0], transition=trans, reward=rew, name="chain3")


def default_suite() -> dict[str, TabularTask]:
    return {
        "bandit2": bandit([1.0, 0.0], name="bandit2"),
        "bandit10": bandit(np.linspace(0.0, 1.0, 10), name="bandit10"),
        "chain3": delayed_chain(),
    }


def bandit_suite() -> dict[str, TabularTask]:
    return {k: v for k, v in default_suite().items() if v.is_bandit}


def get_task(name: str) -> TabularTask:
    suite = default_suite()
    if name not in suite:
        raise ValidationError(f"unknown task {name!r}; known: {sorted(suite)}", "task")
    return suite[name]


@dataclass(frozen=True)
class AdvantageTable:
    q_values: np.ndarray  # (S, A), visitation-weighted over time
    v_values: np.ndarray  # (S,)
    advantages: np.ndarray  # (S, A)
    occupancy: np.ndarray  # (S,), mean over t of d_t, sums to 1
    q_by_time: np.ndarray  # (H, S, A)
    v_by_time: np.ndarray  # (H, S)
    state_dist_by_time: np.ndarray  # (H, S)
    expected_reward: float
    horizon: int

    def gradient(self, probs: np.ndarray) -> np.ndarray:
        """Exact dJ/dz for the policy this table was computed at."""
        return self.horizon * self.occupancy[:, None] * probs * self.advantages


def _check_dims(task: TabularTask, policy: SoftmaxPolicy):
    if (policy.num_states, policy.num_actions) != (task.num_states, task.num_actions):
        raise ValidationError(
            f"policy is {policy.num_states}x{policy.num_actions}, task is {task.num_states}x{task.num_actions}",
            "policy",
        )


def evaluate_probs(task: TabularTask, probs: np.ndarray) -> AdvantageTable:
    """Backward/forward dynamic programming for an explicit probability matrix."""
    S, A, H = task.num_states, task.num_actions, task.horizon
    P, R = task.transition, task.reward
    pi = np.asarray(probs, dtype=np.float64)

    dists = np.empty((H, S))
    d = task.initial_dist.copy()
    for t in range(H):
        dists[t] = d
        d = np.einsum("s,sa,sap->p", d, pi, P)

    q_t = np.empty((H, S, A))
    v_t = np.empty((H, S))
    v_next = np.zeros(S)
    for t in range(H - 1, -1, -1):
        q_t[t] = R + P @ v_next
        v_t[t] = (pi * q_t[t]).sum(axis=1)
        v_next = v_t[t]

    mass = dists.sum(axis=0)
    q = np.empty((S, A))
    for s in range(S):
        if mass[s] > 0:
            q[s] = dists[:, s] @ q_t[:, s, :] / mass[s]
        else:
            q[s] = q_t[:, s, :].mean(axis=0)
    v = (pi * q).sum(axis=1)
    adv = q - v[:, None]
    occ = mass / mass.sum()
    return AdvantageTable(
        q_values=q,
        v_values=v,
        advantages=adv,
        occupancy=occ,
        q_by_time=q_t,
        v_by_time=v_t,
        state_dist_by_time=dists,
        expected_reward=float(task.initial_dist @ v_t[0]),
        horizon=H,
    )


def evaluate_policy(task: TabularTask, policy: SoftmaxPolicy) -> AdvantageTable:
    _check_dims(task, policy)
    return evaluate_probs(task, policy.probabilities())


def expected_reward(task: TabularTask, policy: SoftmaxPolicy) -> float:
    return evaluate_policy(task, policy).expected_reward


@dataclass(frozen=True)
class SampledBatch:
    """Flat per-visit records; index ``i`` is one (state, action) token."""

    states: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    advantage_estimate: np.ndarray
    trajectory_id: np.ndarray
    timestep: np.ndarray
    returns: np.ndarray
    rng_seed: int
    num_trajectories: int
    horizon: int
    advantage_mode: str = "exact"

    def __len__(self):
        return int(self.states.size)

    @property
    def records(self):
        return list(
            zip(
                self.states.tolist(),
                self.actions.tolist(),
                self.log_prob_old.tolist(),
                self.advantage_estimate.tolist(),
                self.trajectory_id.tolist(),
            )
        )

    def action_counts(self, num_states: int, num_actions: int) -> np.ndarray:
        counts = np.zeros((num_states, num_actions))
        np.add.at(counts, (self.states, self.actions), 1.0)
        return counts


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw, one row of ``probs`` per sample."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_batch(
    task: TabularTask,
    policy: SoftmaxPolicy,
    num_trajectories: int,
    rng_seed: int,
    advantage_mode: str = "exact",
) -> SampledBatch:
    """Roll out ``num_trajectories`` episodes of ``policy``.

    ``advantage_mode="exact"`` attaches the exact A(s, a) from
    :func:`evaluate_policy` to every visit. ``"empirical"`` uses the
    Monte Carlo return-to-go minus a per-state baseline averaged over the
    *other* trajectories' visits to that state, which keeps the estimator
    unbiased.
    """
    _check_dims(task, policy)
    if int(num_trajectories) != num_trajectories or num_trajectories < 1:
        raise ValidationError("num_trajectories must be an integer >= 1", "num_trajectories")
    if advantage_mode not in ("exact", "empirical"):
        raise ValidationError(f"unknown advantage_mode {advantage_mode!r}", "advantage_mode")
    M, H, S = int(num_trajectories), task.horizon, task.num_states
    rng = np.random.default_rng(rng_seed)
    pi = policy.probabilities()
    logp = policy.log_probabilities()

    states = np.empty((M, H), dtype=np.int64)
    actions = np.empty((M, H), dtype=np.int64)
    rewards = np.empty((M, H))
    s = _categorical(rng, np.broadcast_to(task.initial_dist, (M, S)))
    for t in range(H):
        a = _categorical(rng, pi[s])
        states[:, t], actions[:, t] = s, a
        rewards[:, t] = task.reward[s, a]
        if t + 1 < H:
            s = _categorical(rng, task.transition[s, a])

    returns = np.cumsum(rewards[:, ::-1], axis=1)[:, ::-1]
    flat_s, flat_a, flat_g = states.ravel(), actions.ravel(), returns.ravel()
    traj = np.repeat(np.arange(M), H)
    if advantage_mode == "exact":
        adv = evaluate_policy(task, policy).advantages[flat_s, flat_a]
    else:
        tot_g = np.bincount(flat_s, weights=flat_g, minlength=S)
        tot_n = np.bincount(flat_s, minlength=S).astype(np.float64)
        own_g = np.zeros((M, S))
        own_n = np.zeros((M, S))
        np.add.at(own_g, (traj, flat_s), flat_g)
        np.add.at(own_n, (traj, flat_s), 1.0)
        other_n = tot_n[flat_s] - own_n[traj, flat_s]
        other_g = tot_g[flat_s] - own_g[traj, flat_s]
        baseline = np.divide(other_g, other_n, out=np.zeros_like(other_g), where=other_n > 0)
        adv = flat_g - baseline
    return SampledBatch(
        states=flat_s,
        actions=flat_a,
        log_prob_old=logp[flat_s, flat_a],
        advantage_estimate=adv,
        trajectory_id=traj,
        timestep=np.tile(np.arange(H), M),
        returns=flat_g,
        rng_seed=int(rng_seed),
        num_trajectories=M,
        horizon=H,
        advantage_mode=advantage_mode,
    )


def brute_force_optimum(task: TabularTask) -> tuple[float, tuple[int, ...]]:
    """Best deterministic stationary policy by exhaustive enumeration.

    Ties go to the lexicographically first action tuple.
    """
    S, A = task.num_states, task.num_actions
    if A**S > BRUTE_FORCE_LIMIT:
        raise CapacityError(f"{A}^{S} deterministic policies exceed the guard of {BRUTE_FORCE_LIMIT}")
    best, best_actions = -math.inf, None
    eye = np.eye(A)
    for choice in itertools.product(range(A), repeat=S):
        j = evaluate_probs(task, eye[list(choice)]).expected_reward
        if j > best:
            best, best_actions = j, choice
    return best, tuple(int(a) for a in best_actions)


def optimal_value_dp(task: TabularTask) -> float:
    """Optimal value over time-dependent deterministic policies (value iteration)."""
    v = np.zeros(task.num_states)
    for _ in range(task.horizon):
        v = (task.reward + task.transition @ v).max(axis=1)
    return float(task.initial_dist @ v)


@dataclass(frozen=True)
class SoftOptimum:
    probabilities: np.ndarray
    expected_reward: float
    entropy: float


def soft_bandit_optimum(rewards, alpha: float) -> SoftOptimum:
    """Maximizer of ``E_pi[r] + alpha * H(pi)`` on a one-step bandit: softmax(r / alpha)."""
    if not alpha > 0 or not math.isfinite(alpha):
        raise DomainError(f"alpha must be a positive finite number, got {alpha}")
    r = np.asarray(rewards, dtype=np.float64).ravel()
    x = r / alpha
    x = x - x.max()
    e = np.exp(x)
    p = e / e.sum()
    logp = np.maximum(x - np.log(e.sum()), math.log(1e-300))
    h = min(max(-float(p @ logp), 0.0), math.log(r.size))
    return SoftOptimum(probabilities=p, expected_reward=float(p @ r), entropy=h)
