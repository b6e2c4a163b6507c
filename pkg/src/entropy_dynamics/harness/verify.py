"""Property checks over every module, reported as machine-readable JSON.

Each check carries a stable ``id`` and the ``refs`` (names of the identities
it exercises). ``mutations`` switches on deliberately broken variants so the
suite can demonstrate that it detects them.
"""

from __future__ import annotations

import math
import time

import numpy as np

from ..diagnostics import (
    actual_entropy_change,
    clip_covariance_check,
    firstorder_entropy_change,
    predict_entropy_changes,
    stability_margin,
    state_covariances,
    suboptimality_audit,
)
from ..env import (
    TabularTask,
    bandit,
    brute_force_optimum,
    default_suite,
    evaluate_policy,
    evaluate_probs,
    optimal_value_dp,
)
from ..policy import SoftmaxPolicy, entropy_gradient, log_prob_stats, state_entropy
from ..updaters import (
    Schedule,
    UpdateBatch,
    UpdateRule,
    apply_clip_cov,
    compute_base_update,
    compute_entropy_reg_update,
    compute_kl_cov_update,
    select_kl_set,
    token_covariance,
)

MUTATIONS = ("clip_identity",)

CHECKS = []


def check(check_id, *refs):
    def wrap(fn):
        CHECKS.append((check_id, refs, fn))
        return fn

    return wrap


def random_policy(rng, num_states, num_actions, scale=3.0):
    return SoftmaxPolicy(rng.uniform(-scale, scale, size=(num_states, num_actions)))


def random_task(rng, num_states, num_actions, horizon):
    trans = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    return TabularTask(
        horizon=horizon,
        initial_dist=rng.dirichlet(np.ones(num_states)),
        transition=trans,
        reward=rng.uniform(-1, 1, size=(num_states, num_actions)),
    )


def enumerate_q(task: TabularTask, probs: np.ndarray) -> np.ndarray:
    """Visitation-weighted Q by summing over every trajectory prefix and suffix."""
    S, A, H = task.num_states, task.num_actions, task.horizon

    def value_from(s, t):
        # expected reward-to-go from (s, t), by full path enumeration
        if t == H:
            return 0.0
        return sum(probs[s, a] * q_from(s, a, t) for a in range(A))

    def q_from(s, a, t):
        return task.reward[s, a] + sum(task.transition[s, a, n] * value_from(n, t + 1) for n in range(S) if t + 1 < H)

    def visit(t):
        d = task.initial_dist.copy()
        for _ in range(t):
            d = np.array([sum(d[s] * probs[s, a] * task.transition[s, a, n] for s in range(S) for a in range(A)) for n in range(S)])
        return d

    dists = np.array([visit(t) for t in range(H)])
    q = np.zeros((S, A))
    for s in range(S):
        mass = dists[:, s].sum()
        for a in range(A):
            vals = [q_from(s, a, t) for t in range(H)]
            q[s, a] = np.dot(dists[:, s], vals) / mass if mass > 0 else np.mean(vals)
    return q


@check("softmax-normalization", "softmax parameterization")
def _softmax(rng, mutations):
    worst = 0.0
    for _ in range(200):
        p = random_policy(rng, 3, int(rng.integers(2, 17)), scale=rng.choice([3.0, 500.0]))
        probs = p.probabilities()
        worst = max(worst, float(np.abs(probs.sum(axis=1) - 1).max()))
        shifted = SoftmaxPolicy(p.logits + rng.normal(size=(3, 1)) * 50)
        worst = max(worst, float(np.abs(shifted.probabilities() - probs).max()))
    return worst <= 1e-12, {"max_error": worst}


@check("entropy-bounds", "entropy of a policy")
def _entropy_bounds(rng, mutations):
    ok = True
    for _ in range(200):
        A = int(rng.integers(2, 17))
        p = random_policy(rng, 1, A, scale=float(rng.choice([1.0, 30.0])))
        h = state_entropy(p, 0)
        st = log_prob_stats(p, 0)
        ok &= 0.0 <= h <= math.log(A) and st.var_log_prob >= 0 and abs(st.entropy + st.mean_log_prob) <= 1e-12
    ok &= abs(state_entropy(SoftmaxPolicy.uniform(1, 4), 0) - math.log(4)) <= 1e-15
    ok &= state_entropy(SoftmaxPolicy([[1e6, 0, 0]]), 0) == 0.0
    return bool(ok), {}


@check("entropy-gradient", "entropy gradient")
def _entropy_gradient(rng, mutations):
    worst, worst_sum = 0.0, 0.0
    h = 1e-6
    for _ in range(200):
        A = int(rng.integers(2, 17))
        p = random_policy(rng, 1, A)
        g = entropy_gradient(p, 0)
        fd = np.empty(A)
        for a in range(A):
            e = np.zeros((1, A))
            e[0, a] = h
            fd[a] = (state_entropy(SoftmaxPolicy(p.logits + e), 0) - state_entropy(SoftmaxPolicy(p.logits - e), 0)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300)))
        worst_sum = max(worst_sum, abs(float(g.sum())))
    return worst <= 1e-5 and worst_sum <= 1e-12, {"max_rel_error": worst, "max_component_sum": worst_sum}


@check("advantage-centering", "advantage has zero policy mean")
def _centering(rng, mutations):
    worst = 0.0
    for task in default_suite().values():
        for _ in range(100):
            p = random_policy(rng, task.num_states, task.num_actions)
            table = evaluate_policy(task, p)
            worst = max(worst, float(np.abs((p.probabilities() * table.advantages).sum(axis=1)).max()))
            worst = max(worst, abs(table.occupancy.sum() - 1.0))
    return worst <= 1e-10, {"max_abs": worst}


@check("exact-evaluation", "expected reward", "advantage definition")
def _enumeration(rng, mutations):
    worst = 0.0
    for _ in range(20):
        task = random_task(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        probs = random_policy(rng, task.num_states, task.num_actions).probabilities()
        table = evaluate_probs(task, probs)
        worst = max(worst, float(np.abs(enumerate_q(task, probs) - table.q_values).max()))
    return worst <= 1e-12, {"max_abs": worst}


@check("policy-improvement", "expected reward")
def _improvement(rng, mutations):
    ok = True
    for _ in range(50):
        task = random_task(rng, 3, 3, 1)  # one-step tasks: greedy w.r.t. Q is a true improvement
        p = random_policy(rng, 3, 3)
        table = evaluate_policy(task, p)
        for s in range(3):
            probs = p.probabilities().copy()
            probs[s] = np.eye(3)[int(np.argmax(table.q_values[s]))]
            ok &= evaluate_probs(task, probs).expected_reward >= table.expected_reward - 1e-12
    # stationary policies can only match or trail the time-dependent optimum
    for task in default_suite().values():
        stationary, dp = brute_force_optimum(task)[0], optimal_value_dp(task)
        ok &= stationary <= dp + 1e-12
        if task.is_bandit:
            ok &= abs(stationary - dp) <= 1e-12
    return bool(ok), {}


@check("soft-optimum-ordering", "suboptimality of global entropy regularization")
def _soft(rng, mutations):
    ok = True
    for _ in range(50):
        r = rng.uniform(0, 1, size=int(rng.integers(2, 8)))
        for alpha in (1e-3, 0.05, 0.5, 5.0):
            audit = suboptimality_audit(bandit(r), alpha)
            ok &= audit.ordering_ok and audit.strict and audit.entropy_bound_ok
    eq = suboptimality_audit(bandit([0.4, 0.4, 0.4]), 0.3)
    ok &= eq.gap == 0.0
    return bool(ok), {}


@check("rule-consistency", "regularized update", "KL-Cov update", "Clip-Cov operator")
def _consistency(rng, mutations):
    ok = True
    for task in default_suite().values():
        p = random_policy(rng, task.num_states, task.num_actions)
        old = random_policy(rng, task.num_states, task.num_actions)
        table = evaluate_policy(task, p)
        base = compute_base_update(p, table, 0.1)
        ok &= np.array_equal(compute_entropy_reg_update(p, table, 0.1, 0.0).deltas, base.deltas)
        ok &= np.array_equal(apply_clip_cov(base, ()).deltas, base.deltas)
        kl = select_kl_set(token_covariance(p, base), 0.3)
        ok &= np.array_equal(compute_kl_cov_update(p, old, table, 0.1, 0.0, kl).deltas, base.deltas)
        ok &= np.array_equal(compute_kl_cov_update(p, p, table, 0.1, 1.0, kl).deltas, base.deltas)
    return bool(ok), {}


@check("token-covariance-mean", "token-wise covariance")
def _token_cov(rng, mutations):
    worst = 0.0
    for task in default_suite().values():
        for _ in range(30):
            p = random_policy(rng, task.num_states, task.num_actions)
            upd = compute_base_update(p, evaluate_policy(task, p), 0.3)
            tc = token_covariance(p, upd)
            direct = np.array([-firstorder_entropy_change(p, upd, s) for s in range(task.num_states)])
            worst = max(worst, float(np.abs(tc.state_cov - direct).max()))
    return worst <= 1e-12, {"max_abs": worst}


@check("clip-zeroing", "Clip-Cov operator")
def _clip_zero(rng, mutations):
    ok = True
    for _ in range(50):
        p = random_policy(rng, 3, 5)
        upd = UpdateBatch(rng.normal(size=(3, 5)), p)
        chosen = {(int(rng.integers(3)), int(rng.integers(5))) for _ in range(4)}
        out = apply_clip_cov(upd, chosen)
        mask = np.zeros((3, 5), dtype=bool)
        for s, a in chosen:
            mask[s, a] = True
        ok &= np.all(out.deltas[mask] == 0) and np.array_equal(out.deltas[~mask], upd.deltas[~mask])
    return bool(ok), {}


@check("kl-selection-order", "KL-Cov top-k selection")
def _kl_select(rng, mutations):
    ok = True
    for _ in range(100):
        n = int(rng.integers(2, 40))
        c = np.round(rng.normal(size=(1, n)), 1)  # rounding creates ties
        k = float(rng.uniform(0.01, 0.99))
        tc = token_covariance(SoftmaxPolicy.uniform(1, n), UpdateBatch(np.zeros((1, n)), SoftmaxPolicy.uniform(1, n)))
        tc = type(tc)(values=c, mean_log_prob=tc.mean_log_prob, mean_delta=tc.mean_delta, state_cov=tc.state_cov)
        got = [a for _, a in select_kl_set(tc, k)]
        oracle = sorted(range(n), key=lambda i: (-abs(c[0, i]), i))[: math.ceil(k * n)]
        ok &= sorted(got) == sorted(oracle)
    return bool(ok), {}


@check("first-order-identity", "first-order entropy change", "entropy dynamics under policy gradient")
def _first_order(rng, mutations):
    worst = 0.0
    for _ in range(100):
        A = int(rng.integers(2, 12))
        task = bandit(rng.uniform(0, 1, size=A))
        p = random_policy(rng, 1, A)
        table = evaluate_policy(task, p)
        rule = UpdateRule.vanilla(0.1)
        pred = predict_entropy_changes(p, table, rule).per_state[0]
        upd = compute_base_update(p, table, 0.1)
        direct = -0.1 * state_covariances(p, table.advantages)[0]
        worst = max(worst, abs(pred - direct), abs(firstorder_entropy_change(p, upd, 0) - direct))
    return worst <= 1e-12, {"max_abs": worst}


@check("quadratic-remainder", "first-order entropy change")
def _quadratic(rng, mutations):
    ratios = []
    for _ in range(100):
        A = int(rng.integers(2, 12))
        task = bandit(rng.uniform(0, 1, size=A))
        p = random_policy(rng, 1, A, scale=2.0)
        table = evaluate_policy(task, p)
        errs = []
        for eta in (0.2, 0.1):
            upd = compute_base_update(p, table, eta)
            errs.append(abs(actual_entropy_change(p, upd, [1.0]) - firstorder_entropy_change(p, upd, 0)))
        if errs[0] > 0:
            ratios.append(errs[1] / errs[0])
    ratios = np.array(ratios)
    inside = float(np.mean((ratios >= 0.15) & (ratios <= 0.40)))
    return inside >= 0.95, {"fraction_in_band": inside, "median_ratio": float(np.median(ratios))}


@check("clip-covariance-identity", "effect of Clip-Cov on covariance")
def _clip_identity(rng, mutations):
    mutate = "clip_identity" in mutations
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        c = rng.normal(size=n) * rng.uniform(0.01, 10)
        m = int(rng.integers(0, n))
        chosen = rng.choice(n, size=m, replace=False)
        chk = clip_covariance_check(c, chosen.tolist(), mutate=mutate)
        worst = max(worst, chk.abs_error)
    return worst <= 1e-12, {"max_abs": worst}


@check("entropy-reg-dominance", "regularized entropy dynamics")
def _reg_dominance(rng, mutations):
    ok, tried = True, 0
    for _ in range(50):
        A = int(rng.integers(2, 8))
        task = bandit(rng.uniform(0, 1, size=A))
        z = np.zeros((1, A))
        z[0, int(rng.integers(A))] = 6.0
        p = SoftmaxPolicy(z + rng.normal(scale=0.3, size=(1, A)))
        table = evaluate_policy(task, p)
        logp = p.log_probabilities()[0]
        probs = p.probabilities()[0]
        var = float(probs @ (logp - probs @ logp) ** 2)
        cov = float(state_covariances(p, table.advantages)[0])
        alpha = 2.0 * max(cov, 0.0) / var + 0.5
        upd = compute_entropy_reg_update(p, table, 1e-3, alpha)
        tried += 1
        ok &= actual_entropy_change(p, upd, [1.0]) > 0
    return bool(ok), {"instances": tried}


@check("stability-bracketing", "stability margin")
def _stability(rng, mutations):
    ok = True
    for _ in range(20):
        p = random_policy(rng, 2, 4)
        d = rng.normal(size=(2, 4))
        prev = 0.0
        for eps in (1e-4, 2e-4, 1e-2):
            res = stability_margin(p, d, eps, [0.5, 0.5])
            ok &= res.bracket_ok and res.gamma > prev
            prev = res.gamma
    return bool(ok), {}


@check("schedule-monotone", "annealing schedule")
def _schedule(rng, mutations):
    from ..updaters import anneal_beta

    s = Schedule("inverse_time", 100.0)
    vals = [anneal_beta(1.0, t, s) for t in range(0, 10000, 7)]
    ok = all(a >= b for a, b in zip(vals, vals[1:])) and anneal_beta(1.0, 100, s) == 0.5
    return ok, {}


def verify_suite(mutations=(), seed: int = 0) -> dict:
    unknown = set(mutations) - set(MUTATIONS)
    if unknown:
        raise ValueError(f"unknown mutations {sorted(unknown)}")
    results = []
    for i, (check_id, refs, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            passed, detail = fn(rng, set(mutations))
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, {"error": f"{type(exc).__name__}: {exc}"}
        results.append(
            {
                "id": check_id,
                "refs": list(refs),
                "passed": bool(passed),
                "detail": detail,
                "seconds": round(time.perf_counter() - t0, 3),
            }
        )
    return {"passed": all(r["passed"] for r in results), "mutations": sorted(mutations), "checks": results}
