"""Numerically stable simplex arithmetic.

Every function accepts a single vector of shape ``(C,)`` or a batch of shape
``(n, C)`` and reduces over the last axis. Negative infinity is a legitimate
logit (empirical proxies produce it) and maps to an exact zero probability.
NaN is never produced from valid inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "DegenerateLogitsError",
    "SupportError",
    "lse",
    "softmax",
    "log_softmax",
    "kl_categorical",
    "entropy",
    "mean_over",
    "shift_logits",
    "stable_mean",
    "encode_nonfinite",
]


class DegenerateLogitsError(ValueError):
    """All entries of a logit vector are -inf."""


class SupportError(ValueError):
    """KL(p || q) is infinite because p puts mass where q has none.

    ``rows`` holds the offending row indices for batched input.
    """

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = [] if rows is None else list(rows)


def _as_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        raise ValueError("logits must have at least one dimension")
    if np.isnan(z).any():
        raise ValueError("logits contain NaN")
    if np.isposinf(z).any():
        raise ValueError("logits contain +inf")
    return z


def lse(z):
    """Log-sum-exp over the last axis, with max subtraction.

    Raises :class:`DegenerateLogitsError` if a row is entirely -inf.
    """
    z = _as_logits(z)
    m = np.max(z, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateLogitsError("degenerate logits: every entry is -inf")
    out = m[..., 0] + np.log(np.sum(np.exp(z - m), axis=-1))
    return out if out.ndim else float(out)


def log_softmax(z):
    """``z - lse(z)``; -inf entries stay -inf."""
    z = _as_logits(z)
    return z - np.expand_dims(np.asarray(lse(z)), -1)


def softmax(z):
    """Probabilities ``exp(z - lse(z))``; -inf logits give exact zeros."""
    return np.exp(log_softmax(z))


def shift_logits(base, delta, eta):
    """``base + eta * delta`` with the convention ``0 * (-inf) = 0``.

    At ``eta == 0`` the base logits are returned untouched (same values,
    new array), so the unscaled model is reproduced bit for bit.
    """
    base = np.asarray(base, dtype=np.float64)
    if eta == 0:
        return base.copy()
    delta = np.asarray(delta, dtype=np.float64)
    return base + eta * delta


def kl_categorical(p, q):
    """KL(p || q) in nats over the last axis, with ``0 log 0 = 0``.

    Raises :class:`SupportError` when some ``p_i > 0`` has ``q_i == 0``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    pos = p > 0
    bad = pos & (q <= 0)
    if bad.any():
        rows = np.nonzero(bad.reshape(-1, p.shape[-1]).any(axis=-1))[0]
        raise SupportError("absolute-continuity violated", rows=rows)
    safe_p = np.where(pos, p, 1.0)
    safe_q = np.where(pos, q, 1.0)
    terms = np.where(pos, p * (np.log(safe_p) - np.log(safe_q)), 0.0)
    out = np.sum(terms, axis=-1)
    # rounding can push an exact zero slightly negative
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def entropy(p):
    """Shannon entropy in nats, ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    pos = p > 0
    terms = np.where(pos, -p * np.log(np.where(pos, p, 1.0)), 0.0)
    out = np.sum(terms, axis=-1)
    return out if out.ndim else float(out)


def mean_over(items: Iterable, f: Callable[[object], float]) -> float:
    """Average of ``f`` over ``items`` in iteration order.

    Uses ``math.fsum`` so the result does not depend on accumulated
    rounding; an empty iterable is an error.
    """
    values = [float(f(item)) for item in items]
    if not values:
        raise ValueError("mean over an empty dataset")
    return math.fsum(values) / len(values)


def stable_mean(values) -> float:
    """Order-independent mean of a 1-d array (exact ``fsum`` accumulation)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("mean over an empty dataset")
    return math.fsum(values.tolist()) / values.size


def encode_nonfinite(obj):
    """Copy of a JSON-like tree with non-finite floats as ``"inf"``, ``"-inf"`` or ``"nan"``."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: encode_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode_nonfinite(v) for v in obj]
    return obj
