"""Seeded training loops and parameter sweeps."""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ..diagnostics import (
    StepDiagnostics,
    firstorder_entropy_changes,
    predict_entropy_changes,
    state_covariances,
    token_covariance_table,
)
from ..env import evaluate_policy, sample_batch
from ..errors import NumericError, ValidationError
from ..policy import SoftmaxPolicy
from ..updaters import apply_update, compute_update
from .config import ExperimentConfig, parse_config

LOGIT_LIMIT = 1e6


def derive_seed(*parts: int) -> int:
    """64-bit seed from integer parts via numpy's SeedSequence hashing."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def exact_gradient(task, policy: SoftmaxPolicy, table=None) -> np.ndarray:
    table = table or evaluate_policy(task, policy)
    return table.gradient(policy.probabilities())


@dataclass
class TrainingTrace:
    config_digest: str
    records: list
    final_policy: SoftmaxPolicy
    config: dict = field(default_factory=dict)
    diverged: bool = False
    divergence_step: int | None = None
    snapshots: dict = field(default_factory=dict, compare=False)

    def __eq__(self, other):
        if not isinstance(other, TrainingTrace):
            return NotImplemented
        return (
            self.config_digest == other.config_digest
            and self.records == other.records
            and np.array_equal(self.final_policy.logits, other.final_policy.logits)
            and self.config == other.config
            and self.diverged == other.diverged
            and self.divergence_step == other.divergence_step
        )

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def final_record(self) -> StepDiagnostics:
        return self.records[-1]


def _pairs(pairs):
    return [[int(s), int(a)] for s, a in pairs]


def run_experiment(config: ExperimentConfig, snapshot_steps=()) -> TrainingTrace:
    """Train for ``config.steps`` steps; record every ``log_every``-th step.

    Per step: keep the previous policy as pi_old, evaluate advantages, compute
    the rule's update, predict the entropy change, apply, measure. The
    record at step ``t`` describes the policy before update ``t``.
    """
    task, rule = config.task, config.rule
    policy = config.initial_policy()
    prev = policy
    snapshot_steps = set(int(s) for s in snapshot_steps)
    snapshots = {}
    records = []
    diverged, div_step = False, None
    for t in range(config.steps):
        if t in snapshot_steps:
            snapshots[t] = policy
        table = evaluate_policy(task, policy)
        batch = None
        if config.mode == "sampled":
            batch = sample_batch(
                task, policy, config.batch_size, derive_seed(config.rng_seed, t, 0), config.advantage_mode
            )
        step_out = compute_update(
            rule, policy, table, step=t, policy_old=prev, batch=batch, rng_seed=derive_seed(config.rng_seed, t, 1)
        )
        upd = step_out.update
        logging = t % config.log_every == 0
        if logging:
            occ = table.occupancy
            if config.mode == "exact":
                pred = predict_entropy_changes(
                    policy,
                    table,
                    rule,
                    prev,
                    beta=step_out.beta_t,
                    kl_set=upd.selected_kl,
                    clip_set=upd.selected_clip,
                )
                predicted = float(occ @ pred.per_state)
                predicted_exact = float(occ @ pred.per_state_exact) if rule.variant == "entropy_reg" else None
                delta = float(occ @ pred.delta) if pred.delta is not None else None
            else:
                predicted = float(occ @ firstorder_entropy_changes(policy, upd.deltas))
                predicted_exact, delta = None, None
            ent = policy.entropies()
            scov = state_covariances(policy, table.advantages)
        try:
            new = apply_update(policy, upd)
        except NumericError:
            diverged, div_step = True, t
            break
        if not np.all(np.abs(new.logits) <= LOGIT_LIMIT):
            diverged, div_step = True, t
            break
        if logging:
            actual = float(occ @ new.entropies() - occ @ ent)
            records.append(
                StepDiagnostics(
                    step=t,
                    avg_entropy=float(occ @ ent),
                    per_state_entropy=[float(x) for x in ent],
                    expected_reward=table.expected_reward,
                    grad_norm=float(np.linalg.norm(table.gradient(policy.probabilities()))),
                    state_cov=[float(x) for x in scov],
                    cov_term=float(occ @ scov),
                    predicted_dH=predicted,
                    actual_dH=actual,
                    predicted_dH_exact=predicted_exact,
                    delta_s=delta,
                    beta_t=step_out.beta_t,
                    token_cov_summary=token_covariance_table(step_out.covariances.values),
                    selected_clip=_pairs(upd.selected_clip),
                    selected_kl=_pairs(upd.selected_kl),
                )
            )
        prev, policy = policy, new
    if config.steps in snapshot_steps:
        snapshots[config.steps] = policy
    return TrainingTrace(
        config_digest=config.digest,
        records=records,
        final_policy=policy,
        config=config.to_json(),
        diverged=diverged,
        divergence_step=div_step,
        snapshots=snapshots,
    )


def _set_path(obj: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = obj
    for k in keys[:-1]:
        nxt = cur.get(k)
        if isinstance(nxt, str) and k == "rule":
            nxt = {"variant": nxt}
        if not isinstance(nxt, dict):
            raise ValidationError(f"cannot set {dotted!r}", dotted)
        cur[k] = nxt = copy.deepcopy(nxt)
        cur = nxt
    cur[keys[-1]] = value


@dataclass
class SweepResult:
    traces: list  # None where a run failed validation
    summary: list  # one dict per grid point


def run_sweep(base_config: ExperimentConfig, grid: dict) -> SweepResult:
    """One run per point of the Cartesian product of ``grid``.

    Keys are dotted config paths (``"rule.alpha"``). Run ``i`` uses seed
    ``base_seed + i``. A run that diverges or fails validation is recorded
    in the summary and the sweep moves on.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValidationError("parameter grid is empty", "grid")
    keys = list(grid)
    traces, summary = [], []
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        params = dict(zip(keys, values))
        raw = copy.deepcopy(base_config.raw)
        for k, v in params.items():
            _set_path(raw, k, v)
        raw["seed"] = base_config.rng_seed + i
        row = {"index": i, "params": params, "seed": raw["seed"]}
        try:
            trace = run_experiment(parse_config(raw))
        except ValidationError as exc:
            traces.append(None)
            summary.append({**row, "error": str(exc)})
            continue
        final = trace.final_policy
        table = evaluate_policy(parse_config(raw).task, final)
        row.update(
            final_reward=table.expected_reward,
            final_entropy=float(table.occupancy @ final.entropies()),
            diverged=trace.diverged,
        )
        traces.append(trace)
        summary.append(row)
    return SweepResult(traces, summary)


def final_metrics(config: ExperimentConfig, trace: TrainingTrace) -> dict:
    table = evaluate_policy(config.task, trace.final_policy)
    grad = table.gradient(trace.final_policy.probabilities())
    return {
        "expected_reward": table.expected_reward,
        "entropy": float(table.occupancy @ trace.final_policy.entropies()),
        "grad_norm": float(np.linalg.norm(grad)),
        "diverged": trace.diverged,
    }


def num_logged(steps: int, log_every: int) -> int:
    return math.ceil(steps / log_every)
