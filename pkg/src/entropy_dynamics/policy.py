"""Tabular softmax policies: probabilities, entropy and its logit gradient.

Every quantity is computed from the logits with a max-shifted log-softmax,
so logits in the thousands are handled without overflow. Log-probabilities
are floored at ``log(PROB_FLOOR)`` before they enter any product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError

PROB_FLOOR = 1e-300
LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class SoftmaxPolicy:
    """Dense logits ``z[s, a]``; probabilities are ``softmax(z[s])`` per state."""

    logits: np.ndarray

    def __post_init__(self):
        z = np.array(self.logits, dtype=np.float64, copy=True)
        if z.ndim == 1:
            z = z[None, :]
        if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
            raise ValidationError(f"logits must be a non-empty 2-D array, got shape {z.shape}", "logits")
        if not np.all(np.isfinite(z)):
            raise DomainError("logits must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "logits", z)

    @property
    def num_states(self) -> int:
        return self.logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.logits.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros((num_states, num_actions)))

    @classmethod
    def from_probabilities(cls, probs) -> "SoftmaxPolicy":
        p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if np.any(p <= 0):
            raise DomainError("softmax policies need strictly positive probabilities")
        return cls(np.log(p))

    def log_probabilities(self) -> np.ndarray:
        """Floored log-probabilities for all states, shape ``(S, A)``."""
        z = self.logits
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return np.maximum(logp, LOG_FLOOR)

    def probabilities(self) -> np.ndarray:
        z = self.logits
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def entropies(self) -> np.ndarray:
        """Per-state entropy in nats, clipped into ``[0, ln A]``."""
        p = self.probabilities()
        h = -(p * self.log_probabilities()).sum(axis=1)
        return np.clip(h, 0.0, math.log(self.num_actions))

    def with_logits(self, logits) -> "SoftmaxPolicy":
        return SoftmaxPolicy(logits)

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "logits": [float(x) for x in self.logits.ravel()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SoftmaxPolicy":
        try:
            n, m = int(obj["num_states"]), int(obj["num_actions"])
            flat = np.asarray(obj["logits"], dtype=np.float64).ravel()
        except KeyError as exc:
            raise ValidationError(f"missing key {exc.args[0]!r}", "policy") from None
        if flat.size != n * m:
            raise ValidationError(f"expected {n * m} logits, got {flat.size}", "policy.logits")
        return cls(flat.reshape(n, m))


@dataclass(frozen=True)
class DistributionStats:
    mean_log_prob: float
    var_log_prob: float
    entropy: float


def _check_state(policy: SoftmaxPolicy, state: int) -> int:
    if not isinstance(state, (int, np.integer)) or not 0 <= state < policy.num_states:
        raise IndexError(f"state {state} out of range for {policy.num_states} states")
    return int(state)


def _row_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return np.maximum(shifted - np.log(np.exp(shifted).sum()), LOG_FLOOR)


def action_probabilities(policy: SoftmaxPolicy, state: int) -> np.ndarray:
    s = _check_state(policy, state)
    z = policy.logits[s]
    e = np.exp(z - z.max())
    return e / e.sum()


def state_entropy(policy: SoftmaxPolicy, state: int) -> float:
    s = _check_state(policy, state)
    logp = _row_log_softmax(policy.logits[s])
    p = action_probabilities(policy, s)
    h = -float(np.dot(p, logp))
    return min(max(h, 0.0), math.log(policy.num_actions))


def average_entropy(policy: SoftmaxPolicy, state_weights) -> float:
    """Occupancy-weighted entropy ``sum_s w(s) H_s``."""
    w = validate_state_weights(state_weights, policy.num_states)
    return float(np.dot(w, policy.entropies()))


def validate_state_weights(state_weights, num_states: int, path: str = "state_weights") -> np.ndarray:
    w = np.asarray(state_weights, dtype=np.float64).ravel()
    if w.size != num_states:
        raise ValidationError(f"expected {num_states} weights, got {w.size}", path)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and non-negative", path)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError(f"weights sum to {w.sum():.12g}, not 1", path)
    return w


def entropy_gradient(policy: SoftmaxPolicy, state: int) -> np.ndarray:
    """dH_s/dz[s, a] = -pi(a|s) * (log pi(a|s) - E_pi[log pi])."""
    s = _check_state(policy, state)
    logp = _row_log_softmax(policy.logits[s])
    p = action_probabilities(policy, s)
    mu = float(np.dot(p, logp))
    return -p * (logp - mu)


def entropy_gradients(policy: SoftmaxPolicy) -> np.ndarray:
    """Entropy gradient for every state at once, shape ``(S, A)``."""
    p = policy.probabilities()
    logp = policy.log_probabilities()
    mu = (p * logp).sum(axis=1, keepdims=True)
    return -p * (logp - mu)


def log_prob_stats(policy: SoftmaxPolicy, state: int) -> DistributionStats:
    s = _check_state(policy, state)
    logp = _row_log_softmax(policy.logits[s])
    p = action_probabilities(policy, s)
    mu = float(np.dot(p, logp))
    var = float(np.dot(p, (logp - mu) ** 2))
    h = min(max(-mu, 0.0), math.log(policy.num_actions))
    return DistributionStats(mean_log_prob=mu, var_log_prob=var, entropy=h)


def weighted_cov(weights: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Covariance of ``x`` and ``y`` under the probability vector ``weights``."""
    mx = np.dot(weights, x)
    my = np.dot(weights, y)
    return float(np.dot(weights, (x - mx) * (y - my)))
