"""Deterministic numeric kernels shared by every other module.

All arithmetic is float64; file I/O downcasts to float32 elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ShapeMismatch, ZeroNormVector

NORM_FLOOR = 1e-12
LOG_CLAMP = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def as_rng(seed) -> np.random.Generator:
    """Accept an integer seed or a ready Generator; the caller owns the result."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]. Raises ZeroNormVector on degenerate input."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine_distance: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNormVector(f"cosine_distance: norms {na:.3e}, {nb:.3e}")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def softmax_from_distances(dists, tau: float) -> np.ndarray:
    """softmax(-dists / tau) with max-subtraction.

    Invariant under adding any constant to all distances (a shared offset
    cancels in the normalization), so 1 - cos vs -cos distances give the
    same probabilities.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = -np.asarray(dists, dtype=float) / tau
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def softmax_rows(logits) -> np.ndarray:
    """Row-wise stable softmax of a logit matrix (or a single logit vector)."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def shannon_entropy(p) -> float:
    """-sum p ln p with 0 ln 0 := 0; in [0, ln K]."""
    p = np.asarray(p, dtype=float)
    pos = p[p > 0.0]
    return float(-(pos * np.log(pos)).sum())


def entropy_rows(p) -> np.ndarray:
    """shannon_entropy applied to each row of a probability matrix."""
    p = np.asarray(p, dtype=float)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy(target, pred) -> float:
    """-sum target ln pred, with pred clamped below at 1e-12 before the log."""
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if target.shape != pred.shape:
        raise DimensionMismatch(f"cross_entropy: {target.shape} vs {pred.shape}")
    return float(-(target * np.log(np.maximum(pred, LOG_CLAMP))).sum())


def kaiming_normal(rows: int, cols: int, rng) -> np.ndarray:
    """i.i.d. N(0, 2/cols) entries (fan-in = cols); deterministic per seed."""
    if rows < 1 or cols < 1:
        raise ValueError(f"kaiming_normal needs positive shape, got ({rows}, {cols})")
    return as_rng(rng).normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols))


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0)


def adam_step(
    param,
    grad,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter, mutates state."""
    param = np.asarray(param, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if param.shape != grad.shape:
        raise ShapeMismatch(f"adam_step: param {param.shape} vs grad {grad.shape}")
    if state.m.shape != param.shape:
        raise ShapeMismatch(f"adam_step: state {state.m.shape} vs param {param.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


def normalize_rows(X) -> np.ndarray:
    """L2-normalize each row; raises ZeroNormVector if any row is degenerate."""
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        bad = int(np.argmax(norms.ravel() < NORM_FLOOR))
        raise ZeroNormVector(f"row {bad} has near-zero norm")
    return X / norms
