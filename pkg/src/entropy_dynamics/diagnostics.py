"""Checks on entropy dynamics: predicted vs. measured entropy change, clipping
covariance, KL step margins, regularization gap, estimator bias/variance,
convergence envelopes and the reward/entropy exponential fit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .env import TabularTask, brute_force_optimum, evaluate_policy, sample_batch, soft_bandit_optimum
from .errors import ScopeError, ValidationError
from .policy import SoftmaxPolicy, average_entropy
from .updaters import (
    UpdateBatch,
    UpdateRule,
    apply_update,
    compute_base_update,
    compute_update,
    select_kl_set,
    token_covariance,
)


@dataclass
class StepDiagnostics:
    step: int
    avg_entropy: float
    per_state_entropy: list
    expected_reward: float
    grad_norm: float
    state_cov: list  # Cov(log pi, pi * A) per state
    cov_term: float  # occupancy-weighted state_cov
    predicted_dH: float
    actual_dH: float
    predicted_dH_exact: float | None = None  # exact-covariance form (entropy_reg only)
    delta_s: float | None = None  # kl_cov only
    beta_t: float | None = None
    token_cov_summary: dict = field(default_factory=dict)
    selected_clip: list = field(default_factory=list)
    selected_kl: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "StepDiagnostics":
        obj = dict(obj)
        obj["selected_clip"] = [list(p) for p in obj.get("selected_clip", [])]
        obj["selected_kl"] = [list(p) for p in obj.get("selected_kl", [])]
        return cls(**obj)


# ---------------------------------------------------------------- entropy change


def _cov_rows(weights, x, y):
    mx = (weights * x).sum(axis=1, keepdims=True)
    my = (weights * y).sum(axis=1, keepdims=True)
    return (weights * (x - mx) * (y - my)).sum(axis=1)


def firstorder_entropy_change(policy: SoftmaxPolicy, update: UpdateBatch, state: int) -> float:
    """``-Cov_{a ~ pi(.|s)}(log pi(a|s), dz[s, a])``."""
    if not 0 <= state < policy.num_states:
        raise IndexError(f"state {state} out of range")
    sl = slice(state, state + 1)
    p = policy.probabilities()[sl]
    return -float(_cov_rows(p, policy.log_probabilities()[sl], update.deltas[sl])[0])


def firstorder_entropy_changes(policy: SoftmaxPolicy, deltas: np.ndarray) -> np.ndarray:
    return -_cov_rows(policy.probabilities(), policy.log_probabilities(), np.asarray(deltas))


def actual_entropy_change(policy: SoftmaxPolicy, update: UpdateBatch, state_weights) -> float:
    after = apply_update(policy, update)
    return average_entropy(after, state_weights) - average_entropy(policy, state_weights)


def state_covariances(policy: SoftmaxPolicy, advantages: np.ndarray) -> np.ndarray:
    """Cov(log pi, pi * A) for every state."""
    p = policy.probabilities()
    return _cov_rows(p, policy.log_probabilities(), p * advantages)


def kl_delta(policy: SoftmaxPolicy, policy_old: SoftmaxPolicy, kl_set, learning_rate, state_weights) -> np.ndarray:
    """Per-state entropy push of the KL-Cov term at unit beta.

    ``eta * d(s) * Cov_pi(log pi, v)`` where ``v = pi - pi_old`` on the
    selected tokens and 0 elsewhere.
    """
    p = policy.probabilities()
    v = np.zeros_like(p)
    diff = p - policy_old.probabilities()
    for s, a in kl_set:
        v[s, a] = diff[s, a]
    return learning_rate * np.asarray(state_weights) * _cov_rows(p, policy.log_probabilities(), v)


@dataclass(frozen=True)
class EntropyPrediction:
    per_state: np.ndarray  # approximation used by the rule's formula
    per_state_exact: np.ndarray  # exact-covariance form; equals per_state except for entropy_reg
    delta: np.ndarray | None = None  # kl_cov only, at unit beta


def predict_entropy_changes(
    policy: SoftmaxPolicy,
    advantage_table,
    rule: UpdateRule,
    policy_old: SoftmaxPolicy | None = None,
    *,
    beta: float | None = None,
    kl_set=None,
    clip_set=None,
) -> EntropyPrediction:
    """First-order entropy change per state under ``rule`` in exact mode.

    ``beta`` overrides ``rule.beta`` (annealed value); ``kl_set`` defaults
    to the top-|C| selection of the base step.
    """
    eta = rule.learning_rate
    occ = advantage_table.occupancy
    p = policy.probabilities()
    logp = policy.log_probabilities()
    base = -eta * occ * state_covariances(policy, advantage_table.advantages)
    if rule.variant == "vanilla":
        return EntropyPrediction(base, base)
    if rule.variant == "entropy_reg":
        mu = (p * logp).sum(axis=1, keepdims=True)
        var = (p * (logp - mu) ** 2).sum(axis=1)
        exact_cov = _cov_rows(p, logp, p * (logp - mu))
        return EntropyPrediction(base + rule.alpha * eta * occ * var, base + rule.alpha * eta * occ * exact_cov)
    if rule.variant == "clip_cov":
        if not clip_set:
            return EntropyPrediction(base, base)
        upd = compute_base_update(policy, advantage_table, eta)
        d = upd.deltas.copy()
        for s, a in clip_set:
            d[s, a] = 0.0
        pred = firstorder_entropy_changes(policy, d)
        return EntropyPrediction(pred, pred)
    if policy_old is None:
        raise ValidationError("kl_cov prediction needs policy_old", "policy_old")
    if kl_set is None:
        upd = compute_base_update(policy, advantage_table, eta)
        kl_set = select_kl_set(token_covariance(policy, upd), rule.select_fraction)
    b = rule.beta if beta is None else beta
    delta = kl_delta(policy, policy_old, kl_set, eta, occ)
    pred = base + b * delta
    return EntropyPrediction(pred, pred, delta)


def predicted_entropy_change(policy, advantage_table, rule, state, policy_old=None, **kwargs) -> float:
    pred = predict_entropy_changes(policy, advantage_table, rule, policy_old, **kwargs)
    return float(pred.per_state[state])


def entropy_reg_forms(policy, advantage_table, rule, state) -> tuple[float, float]:
    """(variance approximation, exact covariance form) for an entropy_reg rule."""
    pred = predict_entropy_changes(policy, advantage_table, rule)
    return float(pred.per_state[state]), float(pred.per_state_exact[state])


# ---------------------------------------------------------------- Clip-Cov


def _as_flat(token_covs):
    if hasattr(token_covs, "flat") and not isinstance(token_covs, np.ndarray):
        return np.asarray(token_covs.flat, dtype=np.float64), token_covs.values.shape[1]
    arr = np.asarray(token_covs, dtype=np.float64)
    return arr.ravel(), (arr.shape[1] if arr.ndim == 2 else None)


def _clip_indices(clip_set, num_actions) -> np.ndarray:
    items = list(clip_set)
    if not items:
        return np.zeros(0, dtype=np.int64)
    if isinstance(items[0], (tuple, list)):
        if num_actions is None:
            raise ValidationError("pair indices need a 2-D covariance table", "clip_set")
        return np.array(sorted({s * num_actions + a for s, a in items}), dtype=np.int64)
    return np.array(sorted(set(int(i) for i in items)), dtype=np.int64)


def clipped_covariance_formula(cov_orig: float, clipped_mean: float, clip_fraction: float, mutate: bool = False) -> float:
    """Mean of C over unclipped tokens, from the full mean and the clipped mean."""
    r = clip_fraction
    if mutate:
        # deliberately wrong sign; lets the verification suite prove it can fail
        return cov_orig + (r / (1.0 - r)) * (clipped_mean - cov_orig)
    return cov_orig - (r / (1.0 - r)) * (clipped_mean - cov_orig)


@dataclass(frozen=True)
class ClipCovarianceCheck:
    direct: float
    formula: float
    cov_orig: float
    clip_fraction: float

    @property
    def abs_error(self) -> float:
        return abs(self.direct - self.formula)


def clip_covariance_check(token_covs, clip_set, mutate: bool = False) -> ClipCovarianceCheck:
    c, A = _as_flat(token_covs)
    if c.size == 0:
        raise ValidationError("no tokens", "token_covs")
    idx = _clip_indices(clip_set, A)
    if idx.size and (idx.min() < 0 or idx.max() >= c.size):
        raise ValidationError("clip index out of range", "clip_set")
    cov_orig = float(c.mean())
    if idx.size == 0:
        return ClipCovarianceCheck(cov_orig, cov_orig, cov_orig, 0.0)
    if idx.size == c.size:
        raise ValidationError("cannot clip every token: the remaining mean is undefined", "clip_set")
    keep = np.ones(c.size, dtype=bool)
    keep[idx] = False
    direct = float(c[keep].mean())
    r = idx.size / c.size
    formula = clipped_covariance_formula(cov_orig, float(c[idx].mean()), r, mutate=mutate)
    return ClipCovarianceCheck(direct, formula, cov_orig, r)


def effective_covariance(token_covs, clip_set) -> float:
    return clip_covariance_check(token_covs, clip_set).direct


# ---------------------------------------------------------------- stability margin


@dataclass(frozen=True)
class StabilityProbeResult:
    gamma: float
    epsilon: float
    kl_at_gamma: float
    kl_at_double: float
    rule: str = "vanilla"

    @property
    def bracket_ok(self) -> bool:
        return self.kl_at_gamma <= self.epsilon < self.kl_at_double


def _weighted_kl(p_old, logp_old, logits, state_weights) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logq = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per_state = (p_old * (logp_old - logq)).sum(axis=1)
    return float(np.dot(state_weights, np.maximum(per_state, 0.0)))


BRACKET_LIMIT = 1100
BISECTIONS = 40


def stability_margin(policy: SoftmaxPolicy, direction, epsilon: float, state_weights=None, rule: str = "vanilla"):
    """Largest step ``gamma`` along ``direction`` with weighted KL(pi_old || pi_new) <= epsilon.

    KL along a ray is convex in the step with zero slope at 0, hence
    increasing, so bracketing by doubling/halving then bisecting is exact.
    """
    if not epsilon > 0:
        raise ValidationError("epsilon must be > 0", "epsilon")
    d = np.asarray(direction.deltas if isinstance(direction, UpdateBatch) else direction, dtype=np.float64)
    if d.shape != policy.logits.shape:
        raise ValidationError("direction shape differs from policy", "direction")
    if state_weights is None:
        state_weights = np.full(policy.num_states, 1.0 / policy.num_states)
    w = np.asarray(state_weights, dtype=np.float64)
    # per-state constant shifts do not move the policy
    if not np.any(np.abs(w[:, None] * (d - d.mean(axis=1, keepdims=True))) > 0):
        raise ValidationError("direction does not move the policy", "direction")
    z = policy.logits
    p = policy.probabilities()
    logp = policy.log_probabilities()

    def kl(step):
        return _weighted_kl(p, logp, z + step * d, w)

    lo, hi = 0.0, 1.0
    if kl(hi) <= epsilon:
        for _ in range(BRACKET_LIMIT):
            lo, hi = hi, hi * 2.0
            if kl(hi) > epsilon:
                break
        else:
            raise ValidationError("KL never exceeds epsilon along this direction", "direction")
    else:
        for _ in range(BRACKET_LIMIT):
            cand = hi / 2.0
            if kl(cand) <= epsilon:
                lo = cand
                break
            hi = cand
        else:
            return StabilityProbeResult(0.0, epsilon, 0.0, kl(hi), rule)
    for _ in range(BISECTIONS):
        mid = 0.5 * (lo + hi)
        if kl(mid) <= epsilon:
            lo = mid
        else:
            hi = mid
    return StabilityProbeResult(lo, epsilon, kl(lo), kl(2.0 * lo), rule)


@dataclass(frozen=True)
class StabilityComparison:
    gamma_base: float
    gamma_reg: float
    gamma_klcov: float
    kappa_hat: float
    reg_le_base: bool
    klcov_rel_diff: float
    probes: tuple


def stability_comparison(task, policy, alpha, k, beta, epsilon, policy_old=None):
    """Margins along the unit-step base, entropy-regularized and KL-Cov directions.

    The KL-Cov penalty vanishes when ``policy_old`` is omitted (or equal to
    ``policy``); ``k == 0`` selects no tokens.
    """
    if alpha < 0:
        raise ValidationError("alpha must be >= 0", "alpha")
    if not 0 <= k < 1:
        raise ValidationError("k must lie in [0, 1)", "k")
    table = evaluate_policy(task, policy)
    occ = table.occupancy
    p = policy.probabilities()
    logp = policy.log_probabilities()
    base = occ[:, None] * p * table.advantages
    mu = (p * logp).sum(axis=1, keepdims=True)
    ent_dir = -occ[:, None] * p * (logp - mu)
    reg = base + alpha * ent_dir if alpha > 0 else base
    klcov = base
    if k > 0 and beta > 0 and policy_old is not None:
        upd = UpdateBatch(base, policy)
        chosen = select_kl_set(token_covariance(policy, upd), k)
        diff = p - policy_old.probabilities()
        pen = np.zeros_like(base)
        for s, a in chosen:
            pen[s, a] = -beta * occ[s] * diff[s, a]
        klcov = base + pen
    pb = stability_margin(policy, base, epsilon, occ, "vanilla")
    pr = pb if reg is base else stability_margin(policy, reg, epsilon, occ, "entropy_reg")
    pk = pb if klcov is base else stability_margin(policy, klcov, epsilon, occ, "kl_cov")
    nb = float(np.linalg.norm(base))
    kappa = float(np.linalg.norm(ent_dir)) / nb if nb > 0 else math.inf
    return StabilityComparison(
        gamma_base=pb.gamma,
        gamma_reg=pr.gamma,
        gamma_klcov=pk.gamma,
        kappa_hat=kappa,
        reg_le_base=pr.gamma <= pb.gamma,
        klcov_rel_diff=abs(pk.gamma - pb.gamma) / pb.gamma,
        probes=(pb, pr, pk),
    )


# ---------------------------------------------------------------- suboptimality


@dataclass(frozen=True)
class SuboptimalityAudit:
    j_star: float
    j_reg_star: float
    gap: float
    log_gap: float  # log of the gap; resolves gaps below float64 resolution
    entropy_reg: float
    entropy_star: float
    entropy_bound_ok: bool
    ordering_ok: bool
    strict: bool


def suboptimality_audit(task: TabularTask, alpha: float) -> SuboptimalityAudit:
    if not task.is_bandit:
        raise ScopeError("the soft optimum is only available for one-step bandits")
    r = task.reward[0]
    j_star, _ = brute_force_optimum(task)
    soft = soft_bandit_optimum(r, alpha)
    # gap = sum_a pi_reg(a) (r_max - r(a)), evaluated in log space
    x = (r - r.max()) / alpha
    log_z = float(np.log(np.exp(x).sum()))
    shortfall = r.max() - r
    mask = shortfall > 0
    if mask.any():
        terms = x[mask] + np.log(shortfall[mask])
        top = terms.max()
        log_gap = float(top + np.log(np.exp(terms - top).sum()) - log_z)
    else:
        log_gap = -math.inf
    gap = math.exp(log_gap)
    h_star = 0.0
    bound = alpha * (soft.entropy - h_star)
    return SuboptimalityAudit(
        j_star=j_star,
        j_reg_star=soft.expected_reward,
        gap=gap,
        log_gap=log_gap,
        entropy_reg=soft.entropy,
        entropy_star=h_star,
        entropy_bound_ok=gap <= bound + 1e-12,
        ordering_ok=soft.expected_reward <= j_star + 1e-15,
        strict=math.isfinite(log_gap),
    )


# ---------------------------------------------------------------- bias / variance


@dataclass(frozen=True)
class BiasVarianceReport:
    mean_update: np.ndarray
    componentwise_variance: np.ndarray
    bias_vector: np.ndarray  # mean of (rule - vanilla) on shared batches
    bias_sparsity: float  # fraction of components with |bias| > 1e-12
    bias_support: np.ndarray  # bool mask of those components
    bias_se: np.ndarray
    vanilla_mean: np.ndarray
    vanilla_variance: np.ndarray
    vanilla_bias_z: np.ndarray  # (mean vanilla - exact) / standard error
    variance_diff: np.ndarray  # rule variance - vanilla variance
    variance_diff_se: np.ndarray
    exact_update: np.ndarray
    selected_counts: np.ndarray  # per component, batches where it was selected
    eligible_counts: np.ndarray  # clip_cov: batches where it sat in the band
    max_batch_support: int  # most components any single batch moved away from vanilla
    num_batches: int


def bias_variance_report(
    task: TabularTask,
    policy: SoftmaxPolicy,
    rule: UpdateRule,
    num_batches: int,
    batch_size: int,
    rng_seed: int,
    policy_old: SoftmaxPolicy | None = None,
) -> BiasVarianceReport:
    """Sampled-mode statistics of ``rule`` against vanilla on the same batches.

    Advantages are Monte Carlo returns with a leave-one-out state baseline.
    """
    if num_batches < 30:
        raise ValidationError("need at least 30 batches", "num_batches")
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2", "batch_size")
    rule_s = replace(rule, mode="sampled")
    table = evaluate_policy(task, policy)
    S, A = policy.logits.shape
    van = np.empty((num_batches, S, A))
    out = np.empty((num_batches, S, A))
    selected = np.zeros((S, A))
    eligible = np.zeros((S, A))
    for b in range(num_batches):
        seed = int(np.random.SeedSequence([rng_seed, b]).generate_state(1)[0])
        batch = sample_batch(task, policy, batch_size, seed, advantage_mode="empirical")
        res = compute_update(rule_s, policy, table, policy_old=policy_old, batch=batch, rng_seed=seed)
        van[b] = res.base.deltas
        out[b] = res.update.deltas
        for s, a in res.update.selected_clip + res.update.selected_kl:
            selected[s, a] += 1
        if res.clip_band is not None:
            lo, hi = res.clip_band
            c = res.covariances.values
            eligible += (c >= lo) & (c <= hi)
    n = num_batches
    diff = out - van
    bias = diff.mean(axis=0)
    per_batch_support = (np.abs(diff) > 1e-12).reshape(n, -1).sum(axis=1)
    bias_se = diff.std(axis=0, ddof=1) / math.sqrt(n)
    support = np.abs(bias) > 1e-12
    exact = compute_base_update(policy, table, rule.learning_rate).deltas
    van_mean = van.mean(axis=0)
    van_se = van.std(axis=0, ddof=1) / math.sqrt(n)
    z = np.divide(van_mean - exact, van_se, out=np.zeros_like(exact), where=van_se > 0)
    # paired variance difference and its delta-method standard error
    psi = (out - out.mean(axis=0)) ** 2 - (van - van_mean) ** 2
    return BiasVarianceReport(
        mean_update=out.mean(axis=0),
        componentwise_variance=out.var(axis=0, ddof=1),
        bias_vector=bias,
        bias_sparsity=float(support.mean()),
        bias_support=support,
        bias_se=bias_se,
        vanilla_mean=van_mean,
        vanilla_variance=van.var(axis=0, ddof=1),
        vanilla_bias_z=z,
        variance_diff=out.var(axis=0, ddof=1) - van.var(axis=0, ddof=1),
        variance_diff_se=psi.std(axis=0, ddof=1) / math.sqrt(n),
        exact_update=exact,
        selected_counts=selected,
        eligible_counts=eligible,
        max_batch_support=int(per_batch_support.max()),
        num_batches=n,
    )


# ---------------------------------------------------------------- convergence


@dataclass(frozen=True)
class ConvergenceReport:
    min_sq_grad_by_T: np.ndarray
    envelope: np.ndarray
    rate_ok: bool
    loglog_slope: float | None


def convergence_tracker(trace, learning_rate: float = 0.1, j_max: float | None = None, min_T: int = 10):
    """Running minimum of ``||grad J||^2`` against ``2 (J_max - J_0) / (eta T)``."""
    records = list(trace)
    if not records:
        raise ValidationError("trace is empty", "trace")
    g2 = np.array([r.grad_norm for r in records], dtype=np.float64) ** 2
    running = np.minimum.accumulate(g2)
    T = np.arange(1, len(records) + 1, dtype=np.float64)
    j0 = records[0].expected_reward
    if j_max is None:
        j_max = max(r.expected_reward for r in records)
    envelope = 2.0 * max(j_max - j0, 0.0) / (learning_rate * T)
    tail = T >= min_T
    rate_ok = bool(np.all(running[tail] <= envelope[tail]))
    slope = None
    pos = tail & (running > 0)
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(T[pos]), np.log(running[pos]), 1)[0])
    return ConvergenceReport(running, envelope, rate_ok, slope)


# ---------------------------------------------------------------- exponential law


@dataclass(frozen=True)
class ExpFit:
    a: float
    b: float
    r_squared: float
    residual_dot: float = 0.0  # max |X^T residual|, solver orthogonality witness

    def to_json(self):
        return asdict(self)


def fit_exponential_law(points) -> ExpFit:
    """Least squares for ``R = -a exp(H) + b``."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 8:
        raise ValidationError("need at least 8 (H, R) points", "points")
    h, r = pts[:, 0], pts[:, 1]
    if np.ptp(h) == 0:
        raise ValidationError("all entropies are equal; the fit is not identifiable", "points")
    X = np.column_stack([-np.exp(h), np.ones_like(h)])
    (a, b), *_ = np.linalg.lstsq(X, r, rcond=None)
    resid = r - X @ np.array([a, b])
    ss_res = float(resid @ resid)
    ss_tot = float(((r - r.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ExpFit(float(a), float(b), min(max(r2, 0.0), 1.0), float(np.abs(X.T @ resid).max()))


# ---------------------------------------------------------------- trace statistics

TOP_FRACTIONS = {"top_10pct": 0.1, "top_1pct": 0.01, "top_0_1pct": 0.001}


def token_covariance_table(values) -> dict:
    """Mean, max, top-fraction means and positive fraction of token covariances."""
    c = np.sort(np.asarray(values, dtype=np.float64).ravel())[::-1]
    out = {"mean": float(c.mean()), "max": float(c[0])}
    for key, q in TOP_FRACTIONS.items():
        out[key] = float(c[: max(1, math.ceil(q * c.size))].mean())
    out["positive_fraction"] = float((c > 0).mean())
    return out


@dataclass(frozen=True)
class TraceStatistics:
    pearson_dH_vs_cov: float | None
    cov_sparsity: dict
    num_steps: int


def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def trace_statistics(trace) -> TraceStatistics:
    records = list(trace)
    if len(records) < 20:
        raise ValidationError("need at least 20 steps", "trace")
    corr = pearson([-r.actual_dH for r in records], [r.cov_term for r in records])
    tables = [r.token_cov_summary for r in records if r.token_cov_summary]
    summary = {}
    if tables:
        for key in tables[0]:
            summary[key] = float(np.mean([t[key] for t in tables]))
    return TraceStatistics(corr, summary, len(records))
