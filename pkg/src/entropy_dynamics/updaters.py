"""Logit update rules: vanilla policy gradient, entropy bonus, Clip-Cov, KL-Cov.

Tokens are (state, action) pairs, flattened row-major, so token ``i`` is
``(i // A, i % A)``. In exact mode every update is weighted by the state
occupancy, which makes ``compute_base_update`` the exact gradient of the
per-step expected reward (``J / H``) scaled by ``eta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np

from .env import AdvantageTable, SampledBatch
from .errors import DomainError, NumericError, ValidationError
from .policy import SoftmaxPolicy

VARIANTS = ("vanilla", "entropy_reg", "clip_cov", "kl_cov")
MODES = ("exact", "sampled")

# batch-mean |C| multiples used when the clip band is not given explicitly
DEFAULT_OMEGA_LOW_SCALE = 1.0
DEFAULT_OMEGA_HIGH_SCALE = 5.0


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"  # "constant" | "inverse_time"
    t_half: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_time"):
            raise ValidationError(f"unknown schedule {self.kind!r}", "rule.schedule")
        if self.kind == "inverse_time":
            if self.t_half is None or not self.t_half > 0:
                raise DomainError(f"t_half must be > 0, got {self.t_half}")
        elif self.t_half is not None:
            raise ValidationError("t_half only applies to inverse_time", "rule.schedule.t_half")

    def to_json(self):
        return {"kind": self.kind} if self.kind == "constant" else {"kind": self.kind, "t_half": self.t_half}


@dataclass(frozen=True)
class UpdateRule:
    """Tagged rule configuration.

    Only the fields of the active variant may be set. ``omega_low`` and
    ``omega_high`` left as ``None`` mean 1x and 5x the batch-mean ``|C|``.
    """

    variant: str = "vanilla"
    learning_rate: float = 0.1
    mode: str = "exact"
    alpha: float | None = None
    clip_ratio: float | None = None
    omega_low: float | None = None
    omega_high: float | None = None
    select_fraction: float | None = None
    beta: float | None = None
    schedule: Schedule | None = None

    _OWN: ClassVar[dict] = {
        "vanilla": (),
        "entropy_reg": ("alpha",),
        "clip_cov": ("clip_ratio", "omega_low", "omega_high"),
        "kl_cov": ("select_fraction", "beta", "schedule"),
    }

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}", "rule.variant")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}", "rule.mode")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError("learning_rate must be > 0", "rule.learning_rate")
        own = self._OWN[self.variant]
        for name in ("alpha", "clip_ratio", "omega_low", "omega_high", "select_fraction", "beta", "schedule"):
            if name not in own and getattr(self, name) is not None:
                raise ValidationError(f"{name} is not a {self.variant} field", f"rule.{name}")
        if self.variant == "entropy_reg":
            if self.alpha is None or not self.alpha >= 0 or not math.isfinite(self.alpha):
                raise ValidationError("alpha must be a finite number >= 0", "rule.alpha")
        elif self.variant == "clip_cov":
            if self.clip_ratio is None or not 0 < self.clip_ratio < 1:
                raise ValidationError("clip_ratio must lie in (0, 1)", "rule.clip_ratio")
            lo, hi = self.omega_low, self.omega_high
            if (lo is None) != (hi is None):
                raise ValidationError("set both omega bounds or neither", "rule.omega_low")
            if lo is not None and not lo <= hi:
                raise ValidationError("omega_low must be <= omega_high", "rule.omega_low")
        elif self.variant == "kl_cov":
            if self.select_fraction is None or not 0 < self.select_fraction < 1:
                raise ValidationError("select_fraction must lie in (0, 1)", "rule.select_fraction")
            if self.beta is None or not self.beta >= 0 or not math.isfinite(self.beta):
                raise ValidationError("beta must be a finite number >= 0", "rule.beta")
            if self.schedule is None:
                object.__setattr__(self, "schedule", Schedule())

    @classmethod
    def vanilla(cls, learning_rate=0.1, mode="exact"):
        return cls("vanilla", learning_rate, mode)

    @classmethod
    def entropy_reg(cls, alpha, learning_rate=0.1, mode="exact"):
        return cls("entropy_reg", learning_rate, mode, alpha=alpha)

    @classmethod
    def clip_cov(cls, clip_ratio=0.01, omega_low=None, omega_high=None, learning_rate=0.1, mode="exact"):
        return cls("clip_cov", learning_rate, mode, clip_ratio=clip_ratio, omega_low=omega_low, omega_high=omega_high)

    @classmethod
    def kl_cov(cls, select_fraction=0.002, beta=1.0, schedule=None, learning_rate=0.1, mode="exact"):
        return cls(
            "kl_cov", learning_rate, mode, select_fraction=select_fraction, beta=beta, schedule=schedule or Schedule()
        )

    def to_json(self) -> dict:
        out = {"variant": self.variant, "learning_rate": self.learning_rate, "mode": self.mode}
        for name in self._OWN[self.variant]:
            value = getattr(self, name)
            if name == "schedule":
                out[name] = value.to_json()
            elif value is not None:
                out[name] = value
        return out


@dataclass(frozen=True)
class UpdateBatch:
    deltas: np.ndarray  # (S, A)
    policy_old: SoftmaxPolicy
    selected_clip: tuple = ()
    selected_kl: tuple = ()
    mode: str = "exact"
    # per-state action weights used for covariance means: pi in exact mode,
    # empirical visit frequencies in sampled mode
    action_weights: np.ndarray | None = None
    state_weights: np.ndarray | None = None
    penalty: np.ndarray | None = None  # KL-Cov term added to the base deltas

    def __post_init__(self):
        d = np.array(self.deltas, dtype=np.float64)
        if d.shape != self.policy_old.logits.shape:
            raise ValidationError(f"deltas shape {d.shape} != policy shape {self.policy_old.logits.shape}", "deltas")
        d.setflags(write=False)
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "selected_clip", tuple(sorted(tuple(map(int, t)) for t in self.selected_clip)))
        object.__setattr__(self, "selected_kl", tuple(sorted(tuple(map(int, t)) for t in self.selected_kl)))
        if self.action_weights is None:
            object.__setattr__(self, "action_weights", self.policy_old.probabilities())
        if self.state_weights is None:
            S = d.shape[0]
            object.__setattr__(self, "state_weights", np.full(S, 1.0 / S))
        if set(self.selected_clip) & set(self.selected_kl):
            raise ValidationError("clip and KL selections must be disjoint", "selected")


@dataclass(frozen=True)
class TokenCovariance:
    values: np.ndarray  # C(s, a), (S, A)
    mean_log_prob: np.ndarray  # (S,)
    mean_delta: np.ndarray  # (S,)
    state_cov: np.ndarray  # (S,), weighted mean of C per state

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


def _flat_to_pairs(indices, num_actions: int) -> tuple:
    return tuple((int(i) // num_actions, int(i) % num_actions) for i in sorted(indices))


def _pairs_to_flat(pairs, num_actions: int) -> np.ndarray:
    return np.array([s * num_actions + a for s, a in pairs], dtype=np.int64)


def _check_table(policy: SoftmaxPolicy, table: AdvantageTable):
    if table.advantages.shape != policy.logits.shape:
        raise ValidationError(
            f"advantage table {table.advantages.shape} does not match policy {policy.logits.shape}", "advantage_table"
        )


def compute_base_update(
    policy: SoftmaxPolicy,
    advantage_table: AdvantageTable,
    learning_rate: float,
    mode: str = "exact",
    batch: SampledBatch | None = None,
) -> UpdateBatch:
    """Vanilla logit step.

    Exact mode: ``eta * d(s) * pi(a|s) * A(s, a)``. Sampled mode: the
    score-function average ``eta / (M H) * sum_i A_i (e_{a_i} - pi(.|s_i))``
    whose expectation equals the exact step.
    """
    _check_table(policy, advantage_table)
    if not learning_rate > 0:
        raise ValidationError("learning_rate must be > 0", "learning_rate")
    pi = policy.probabilities()
    occ = advantage_table.occupancy
    if mode == "exact":
        deltas = learning_rate * occ[:, None] * pi * advantage_table.advantages
        return UpdateBatch(deltas, policy, mode="exact", action_weights=pi, state_weights=occ)
    if mode != "sampled":
        raise ValidationError(f"unknown mode {mode!r}", "mode")
    if batch is None:
        raise ValidationError("sampled mode needs a SampledBatch", "batch")
    S, A = policy.logits.shape
    n = batch.num_trajectories * batch.horizon
    grad = np.zeros((S, A))
    np.add.at(grad, (batch.states, batch.actions), batch.advantage_estimate)
    adv_by_state = np.bincount(batch.states, weights=batch.advantage_estimate, minlength=S)
    grad -= adv_by_state[:, None] * pi
    counts = batch.action_counts(S, A)
    visits = counts.sum(axis=1)
    freq = np.where(visits[:, None] > 0, counts / np.maximum(visits, 1)[:, None], pi)
    return UpdateBatch(
        learning_rate * grad / n,
        policy,
        mode="sampled",
        action_weights=freq,
        state_weights=visits / visits.sum(),
    )


def compute_entropy_reg_update(
    policy: SoftmaxPolicy,
    advantage_table: AdvantageTable,
    learning_rate: float,
    alpha: float,
    base: UpdateBatch | None = None,
) -> UpdateBatch:
    """Base step plus ``alpha * eta * d(s) * dH_s/dz``."""
    if not alpha >= 0 or not math.isfinite(alpha):
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    if base is None:
        base = compute_base_update(policy, advantage_table, learning_rate)
    if alpha == 0:
        return base
    pi = policy.probabilities()
    logp = policy.log_probabilities()
    mu = (pi * logp).sum(axis=1, keepdims=True)
    bonus = -alpha * learning_rate * advantage_table.occupancy[:, None] * pi * (logp - mu)
    return replace(base, deltas=base.deltas + bonus)


def token_covariance(policy: SoftmaxPolicy, update: UpdateBatch, state: int | None = None) -> TokenCovariance:
    """Per-token ``C = (log pi - mu_log) * (dz - mu_dz)`` with means under ``update.action_weights``.

    With ``state`` given, the result covers that single state (shape ``(1, A)``).
    """
    logp = policy.log_probabilities()
    w = update.action_weights
    dz = update.deltas
    if state is not None:
        if not 0 <= state < policy.num_states:
            raise IndexError(f"state {state} out of range")
        sl = slice(state, state + 1)
        logp, w, dz = logp[sl], w[sl], dz[sl]
    mu_log = (w * logp).sum(axis=1)
    mu_dz = (w * dz).sum(axis=1)
    c = (logp - mu_log[:, None]) * (dz - mu_dz[:, None])
    return TokenCovariance(values=c, mean_log_prob=mu_log, mean_delta=mu_dz, state_cov=(w * c).sum(axis=1))


def default_clip_band(covariances: TokenCovariance) -> tuple[float, float]:
    scale = float(np.mean(np.abs(covariances.flat)))
    return DEFAULT_OMEGA_LOW_SCALE * scale, DEFAULT_OMEGA_HIGH_SCALE * scale


def select_clip_set(covariances: TokenCovariance, omega_low, omega_high, clip_ratio: float, rng_seed) -> tuple:
    """Seeded uniform draw of ``floor(r N)`` tokens whose ``C`` lies in the band."""
    if not 0 < clip_ratio < 1:
        raise ValidationError("clip_ratio must lie in (0, 1)", "clip_ratio")
    c = covariances.flat
    if c.size == 0:
        raise ValidationError("no tokens to select from", "covariances")
    if omega_low is None or omega_high is None:
        omega_low, omega_high = default_clip_band(covariances)
    eligible = np.flatnonzero((c >= omega_low) & (c <= omega_high))
    count = math.floor(clip_ratio * c.size)
    if count >= eligible.size:
        chosen = eligible
    elif count == 0:
        chosen = eligible[:0]
    else:
        rng = np.random.default_rng(rng_seed)
        chosen = rng.choice(eligible, size=count, replace=False)
    return _flat_to_pairs(chosen, covariances.values.shape[1])


def select_kl_set(covariances: TokenCovariance, select_fraction: float) -> tuple:
    """The ``ceil(k N)`` tokens with largest ``|C|``; ties go to the lower flat index."""
    if not 0 < select_fraction < 1:
        raise ValidationError("select_fraction must lie in (0, 1)", "select_fraction")
    c = covariances.flat
    count = math.ceil(select_fraction * c.size)
    order = np.lexsort((np.arange(c.size), -np.abs(c)))
    return _flat_to_pairs(order[:count], covariances.values.shape[1])


def apply_clip_cov(update: UpdateBatch, clip_set) -> UpdateBatch:
    """Zero the deltas at ``clip_set``; every other entry is left bit-identical."""
    pairs = tuple(clip_set)
    if not pairs:
        return update
    S, A = update.deltas.shape
    d = update.deltas.copy()
    for s, a in pairs:
        if not (0 <= s < S and 0 <= a < A):
            raise ValidationError(f"token {(s, a)} out of range", "clip_set")
        d[s, a] = 0.0
    return replace(update, deltas=d, selected_clip=pairs)


def kl_penalty(policy, policy_old, learning_rate, beta, kl_set, state_weights) -> np.ndarray:
    """``-eta * beta * d(s) * (pi - pi_old)`` on ``kl_set``, zero elsewhere."""
    pi = policy.probabilities()
    pi_old = policy_old.probabilities()
    out = np.zeros_like(pi)
    for s, a in kl_set:
        out[s, a] = -learning_rate * beta * state_weights[s] * (pi[s, a] - pi_old[s, a])
    return out


def compute_kl_cov_update(
    policy: SoftmaxPolicy,
    policy_old: SoftmaxPolicy,
    advantage_table: AdvantageTable,
    learning_rate: float,
    beta: float,
    kl_set,
    base: UpdateBatch | None = None,
) -> UpdateBatch:
    if policy_old.logits.shape != policy.logits.shape:
        raise ValidationError("policy_old shape differs from policy", "policy_old")
    if not beta >= 0 or not math.isfinite(beta):
        raise DomainError(f"beta must be >= 0, got {beta}")
    if base is None:
        base = compute_base_update(policy, advantage_table, learning_rate)
    pairs = tuple(kl_set)
    S, A = policy.logits.shape
    for s, a in pairs:
        if not (0 <= s < S and 0 <= a < A):
            raise ValidationError(f"token {(s, a)} out of range", "kl_set")
    if beta == 0:
        return replace(base, selected_kl=pairs, penalty=np.zeros((S, A)))
    pen = kl_penalty(policy, policy_old, learning_rate, beta, pairs, advantage_table.occupancy)
    return replace(base, deltas=base.deltas + pen, selected_kl=pairs, penalty=pen)


def anneal_beta(beta0: float, step: int, schedule: Schedule | None = None) -> float:
    if step < 0:
        raise DomainError(f"step must be >= 0, got {step}")
    schedule = schedule or Schedule()
    if schedule.kind == "constant":
        return float(beta0)
    if schedule.t_half is None or not schedule.t_half > 0:
        raise DomainError("t_half must be > 0")
    return float(beta0) / (1.0 + step / schedule.t_half)


def apply_update(policy: SoftmaxPolicy, update: UpdateBatch) -> SoftmaxPolicy:
    d = update.deltas
    if d.shape != policy.logits.shape:
        raise ValidationError(f"update shape {d.shape} != policy shape {policy.logits.shape}", "update")
    if not np.all(np.isfinite(d)):
        raise NumericError("update contains non-finite deltas")
    return SoftmaxPolicy(policy.logits + d)


@dataclass(frozen=True)
class RuleStep:
    """Everything one rule application produced, before the step is taken."""

    update: UpdateBatch
    base: UpdateBatch
    covariances: TokenCovariance
    beta_t: float | None = None
    clip_band: tuple | None = None


def compute_update(
    rule: UpdateRule,
    policy: SoftmaxPolicy,
    advantage_table: AdvantageTable,
    *,
    step: int = 0,
    policy_old: SoftmaxPolicy | None = None,
    batch: SampledBatch | None = None,
    rng_seed=0,
) -> RuleStep:
    """Dispatch on ``rule.variant``; selection uses covariances of the base step."""
    eta = rule.learning_rate
    base = compute_base_update(policy, advantage_table, eta, rule.mode, batch)
    cov = token_covariance(policy, base)
    if rule.variant == "vanilla":
        return RuleStep(base, base, cov)
    if rule.variant == "entropy_reg":
        return RuleStep(compute_entropy_reg_update(policy, advantage_table, eta, rule.alpha, base=base), base, cov)
    if rule.variant == "clip_cov":
        lo, hi = rule.omega_low, rule.omega_high
        if lo is None:
            lo, hi = default_clip_band(cov)
        chosen = select_clip_set(cov, lo, hi, rule.clip_ratio, rng_seed)
        return RuleStep(apply_clip_cov(base, chosen), base, cov, clip_band=(lo, hi))
    beta_t = anneal_beta(rule.beta, step, rule.schedule)
    chosen = select_kl_set(cov, rule.select_fraction)
    old = policy if policy_old is None else policy_old
    upd = compute_kl_cov_update(policy, old, advantage_table, eta, beta_t, chosen, base=base)
    return RuleStep(upd, base, cov, beta_t=beta_t)
