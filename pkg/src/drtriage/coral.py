"""CORAL ordinal head: cumulative targets, smoothed loss, rank-consistent
decoding and temperature calibration of the cumulative logits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NUM_GRADES = 5

T_MIN, T_MAX = 0.05, 20.0


@dataclass
class CoralHead:
    """Shared projection ``weight`` (feature_dim,) plus K-1 rank ``biases``."""

    weight: Tensor
    biases: Tensor

    def __post_init__(self):
        if self.biases.data.ndim != 1 or self.biases.size < 1:
            raise ValueError("CoralHead needs at least one bias (K >= 2)")

    @property
    def K(self) -> int:
        return self.biases.size + 1

    @classmethod
    def init(cls, feature_dim: int, K: int = NUM_GRADES, seed: int = 0) -> CoralHead:
        if K < 2:
            raise ValueError("K must be >= 2")
        rng = np.random.Generator(np.random.PCG64(seed))
        bound = 1.0 / math.sqrt(feature_dim)
        return cls(
            Tensor(rng.uniform(-bound, bound, feature_dim), requires_grad=True),
            Tensor(np.zeros(K - 1), requires_grad=True),
        )

    def params(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.biases": self.biases}

    def biases_sorted(self) -> bool:
        """Diagnostic: learned biases non-increasing (rank-consistent)."""
        return bool(np.all(np.diff(self.biases.data) <= 0))


def cumulative_targets(y, K: int = NUM_GRADES) -> np.ndarray:
    """t_k = 1 exactly when y >= k, for k = 1..K-1. Accepts a grade or an array."""
    y_arr = np.asarray(y)
    if y_arr.dtype.kind not in "iu" or np.any(y_arr < 0) or np.any(y_arr >= K):
        raise ValueError(f"grade(s) must be integers in 0..{K - 1}, got {y!r}")
    k = np.arange(1, K)
    return (y_arr[..., None] >= k).astype(np.float64)


def smooth(t, epsilon: float) -> np.ndarray:
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    return np.asarray(t, dtype=np.float64) * (1 - epsilon) + epsilon / 2


def coral_logits(features, head: CoralHead) -> Tensor:
    """logit_k = weight . features + b_k, batched over leading rows."""
    f = ad._as_tensor(features)
    if f.data.ndim == 1:
        f = ad.reshape(f, (1, f.shape[0]))
    if f.data.ndim != 2 or f.shape[1] != head.weight.shape[0]:
        raise ad.ShapeError(f"coral_logits: features {f.shape} vs weight {head.weight.shape}")
    g = ad.matmul(f, ad.reshape(head.weight, (head.weight.shape[0], 1)))
    return ad.add(g, head.biases)


def coral_loss(logits, targets) -> Tensor:
    """Mean over the batch of the summed per-threshold binary cross-entropy.

    Uses -log sigmoid(x) = softplus(-x) so that -t log s(x) - (1-t) log(1-s(x))
    becomes softplus(x) - t x with softplus(x) = -log sigmoid(-x).
    """
    z = ad._as_tensor(logits)
    t = np.asarray(targets, dtype=z.data.dtype)
    if z.data.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
        t = t.reshape(1, -1)
    if t.shape != z.shape:
        raise ad.ShapeError(f"coral_loss: logits {z.shape} vs targets {t.shape}")
    softplus = ad.scalar_mul(ad.log(ad.sigmoid(ad.scalar_mul(z, -1.0))), -1.0)
    per = ad.sub(softplus, ad.mul(z, Tensor(t, dtype=z.data.dtype)))
    return ad.scalar_mul(ad.sum(per), 1.0 / z.shape[0])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def decode(logits) -> tuple[np.ndarray | int, np.ndarray]:
    """grade = number of thresholds with probability strictly above 0.5."""
    probs = _sigmoid(np.asarray(logits.data if isinstance(logits, Tensor) else logits))
    grades = (probs > 0.5).sum(axis=-1)
    if grades.ndim == 0:
        return int(grades), probs
    return grades, probs


def apply_temperature(logits, T: float) -> np.ndarray:
    if not T > 0:
        raise ValueError("temperature must be positive")
    return np.asarray(logits, dtype=np.float64) / T


def binary_nll(logits, targets) -> float:
    """Mean cumulative binary cross-entropy in float64 (no graph)."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    softplus = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return float(np.mean(np.sum(softplus - t * x, axis=-1)))


def fit_temperature(val_logits, val_targets, tol: float = 1e-4) -> float:
    """Golden-section search for T in [0.05, 20] minimizing the cumulative NLL
    of logits / T against unsmoothed cumulative targets."""
    x = np.asarray(val_logits, dtype=np.float64)
    t = np.asarray(val_targets, dtype=np.float64)
    if x.size == 0:
        raise ValueError("fit_temperature needs a nonempty validation set")
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and targets {t.shape} differ in shape")

    def loss(T: float) -> float:
        return binary_nll(x / T, t)

    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = T_MIN, T_MAX
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = loss(c), loss(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = loss(d)
    return (a + b) / 2
