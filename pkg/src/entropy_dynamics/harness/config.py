"""Experiment configuration: strict JSON parsing with field-path errors."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..env import TabularTask, default_suite
from ..errors import DomainError, ValidationError
from ..policy import SoftmaxPolicy
from ..updaters import Schedule, UpdateRule

OUTPUT_DIR_ENV = "ENTROPY_DYNAMICS_OUT"

DEFAULTS = {
    "learning_rate": 0.1,
    "steps": 2000,
    "log_every": 4,
    "mode": "exact",
    "batch_size": 64,
    "seed": 0,
    "advantage_mode": "exact",
}

RULE_DEFAULTS = {
    "vanilla": {},
    "entropy_reg": {"alpha": 0.001},
    "clip_cov": {"clip_ratio": 0.01},
    "kl_cov": {"select_fraction": 0.002, "beta": 1.0, "schedule": {"kind": "constant"}},
}

TOP_KEYS = {"task", "rule", "initial_logits", "output_path", *DEFAULTS}
RULE_KEYS = {
    "vanilla": {"variant"},
    "entropy_reg": {"variant", "alpha"},
    "clip_cov": {"variant", "clip_ratio", "omega_low", "omega_high"},
    "kl_cov": {"variant", "select_fraction", "beta", "schedule"},
}


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "runs"))


@dataclass(frozen=True)
class ExperimentConfig:
    task: TabularTask
    rule: UpdateRule
    steps: int
    learning_rate: float
    mode: str
    batch_size: int
    rng_seed: int
    log_every: int
    advantage_mode: str
    output_path: str | None = None
    initial_logits: tuple | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def initial_policy(self) -> SoftmaxPolicy:
        if self.initial_logits is None:
            return SoftmaxPolicy.uniform(self.task.num_states, self.task.num_actions)
        z = np.asarray(self.initial_logits, dtype=np.float64).reshape(self.task.num_states, self.task.num_actions)
        return SoftmaxPolicy(z)

    def to_json(self) -> dict:
        """Canonical form: every default made explicit."""
        return copy.deepcopy(self.raw)

    @property
    def digest(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return parse_config({**self.raw, "seed": int(seed)})


def _number(obj, key, path, kind=float):
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"expected a number, got {value!r}", path)
    if kind is int:
        if int(value) != value:
            raise ValidationError(f"expected an integer, got {value!r}", path)
        return int(value)
    return float(value)


def _parse_rule(obj, learning_rate, mode) -> tuple[UpdateRule, dict]:
    if isinstance(obj, str):
        obj = {"variant": obj}
    if not isinstance(obj, dict):
        raise ValidationError("expected an object", "rule")
    variant = obj.get("variant")
    if variant not in RULE_KEYS:
        raise ValidationError(f"unknown variant {variant!r}", "rule.variant")
    unknown = set(obj) - RULE_KEYS[variant]
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)} for {variant}", f"rule.{sorted(unknown)[0]}")
    merged = {**copy.deepcopy(RULE_DEFAULTS[variant]), **obj}
    kwargs = {}
    for key in RULE_KEYS[variant] - {"variant", "schedule"}:
        if key in merged and merged[key] is not None:
            kwargs[key] = _number(merged, key, f"rule.{key}")
    if variant == "kl_cov":
        sched = merged["schedule"]
        if isinstance(sched, str):
            sched = {"kind": sched}
        if not isinstance(sched, dict) or set(sched) - {"kind", "t_half"}:
            raise ValidationError("expected {kind, t_half?}", "rule.schedule")
        try:
            kwargs["schedule"] = Schedule(sched.get("kind", "constant"), sched.get("t_half"))
        except DomainError as exc:
            raise ValidationError(str(exc), "rule.schedule.t_half") from None
        merged["schedule"] = kwargs["schedule"].to_json()
    try:
        rule = UpdateRule(variant, learning_rate, mode, **kwargs)
    except DomainError as exc:
        raise ValidationError(str(exc), "rule") from None
    return rule, merged


def parse_config(obj: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ValidationError("config must be a JSON object", "config")
    unknown = set(obj) - TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", sorted(unknown)[0])
    if "task" not in obj:
        raise ValidationError("missing", "task")
    if "rule" not in obj:
        raise ValidationError("missing", "rule")
    merged = {**DEFAULTS, **obj}

    task_spec = merged["task"]
    if isinstance(task_spec, str):
        suite = default_suite()
        if task_spec in suite:
            task = suite[task_spec]
        else:
            path = Path(task_spec) if base_dir is None else base_dir / task_spec
            if not path.is_file():
                raise ValidationError(f"unknown task {task_spec!r}; known: {sorted(suite)}", "task")
            with open(path, encoding="utf-8") as fh:
                task = TabularTask.from_json(json.load(fh), name=path.stem)
            merged["task"] = task.to_json()
    elif isinstance(task_spec, dict):
        task = TabularTask.from_json(task_spec)
    else:
        raise ValidationError("expected a task name or an inline task object", "task")

    lr = _number(merged, "learning_rate", "learning_rate")
    if not lr > 0:
        raise ValidationError("must be > 0", "learning_rate")
    steps = _number(merged, "steps", "steps", int)
    log_every = _number(merged, "log_every", "log_every", int)
    batch_size = _number(merged, "batch_size", "batch_size", int)
    seed = _number(merged, "seed", "seed", int)
    if steps < 1:
        raise ValidationError("must be >= 1", "steps")
    if log_every < 1:
        raise ValidationError("must be >= 1", "log_every")
    mode = merged["mode"]
    if mode not in ("exact", "sampled"):
        raise ValidationError(f"unknown mode {mode!r}", "mode")
    if mode == "sampled" and batch_size < 1:
        raise ValidationError("sampled mode needs batch_size >= 1", "batch_size")
    if merged["advantage_mode"] not in ("exact", "empirical"):
        raise ValidationError(f"unknown advantage_mode {merged['advantage_mode']!r}", "advantage_mode")
    if seed < 0:
        raise ValidationError("must be >= 0", "seed")

    rule, rule_raw = _parse_rule(merged["rule"], lr, mode)
    merged["rule"] = rule_raw

    init = merged.get("initial_logits")
    if init is not None:
        arr = np.asarray(init, dtype=np.float64).ravel()
        if arr.size != task.num_states * task.num_actions:
            raise ValidationError(f"expected {task.num_states * task.num_actions} values", "initial_logits")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("must be finite", "initial_logits")
        init = tuple(float(x) for x in arr)
        merged["initial_logits"] = list(init)
    out = merged.get("output_path")
    if out is not None and not isinstance(out, str):
        raise ValidationError("expected a path string", "output_path")
    return ExperimentConfig(
        task=task,
        rule=rule,
        steps=steps,
        learning_rate=lr,
        mode=mode,
        batch_size=batch_size,
        rng_seed=seed,
        log_every=log_every,
        advantage_mode=merged["advantage_mode"],
        output_path=out,
        initial_logits=init,
        raw=merged,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ValidationError(f"not UTF-8: {exc}", "config") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc}", "config") from None
    return parse_config(obj, base_dir=path.parent)
