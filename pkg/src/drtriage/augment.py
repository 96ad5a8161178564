"""Seeded training-time augmentations on 8-bit images.

Order is fixed: horizontal flip, then shift/scale/rotate, then
brightness/contrast.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentPolicy:
    p_flip: float = 0.5
    max_shift: float = 0.0625
    max_scale_delta: float = 0.1
    max_rotate: float = 15.0
    max_brightness: float = 0.2
    max_contrast: float = 0.2

    def __post_init__(self):
        if not 0 <= self.p_flip <= 1:
            raise ValueError("p_flip must lie in [0, 1]")
        for name in ("max_shift", "max_scale_delta", "max_rotate", "max_brightness", "max_contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_scale_delta >= 1 or self.max_contrast >= 1:
            raise ValueError("max_scale_delta and max_contrast must be < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AugmentPolicy:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augment keys: {sorted(unknown)}")
        return cls(**d)


IDENTITY = AugmentPolicy(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def shift_scale_rotate(img: np.ndarray, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0, angle_deg: float = 0.0) -> np.ndarray:
    """Affine warp about the image centre, sampled bilinearly by inverse mapping.

    dx, dy are pixel shifts (positive moves content right / down); positive
    angles rotate content counter-clockwise as displayed. Taps falling
    outside the source contribute 0.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    h, w = img.shape[:2]
    if dx == 0 and dy == 0 and scale == 1 and angle_deg == 0:
        return img.copy()
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # undo shift, rotation and scale in turn
    u, v = xx - cx - dx, yy - cy - dy
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    sx = (c * u - s * v) / scale + cx
    sy = (s * u + c * v) / scale + cy

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = img.astype(np.float64)
    if src.ndim == 2:
        src = src[..., None]

    def tap(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0)

    out = (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.reshape(img.shape)


def brightness_contrast(img: np.ndarray, beta_add: float = 0.0, alpha_mul: float = 1.0) -> np.ndarray:
    """clip(alpha * I + 255 * beta)."""
    if not alpha_mul > 0:
        raise ValueError("alpha_mul must be positive")
    if beta_add == 0 and alpha_mul == 1:
        return img.copy()
    out = alpha_mul * img.astype(np.float64) + beta_add * 255.0
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def augment(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random draw of the policy. Always consumes the same number of variates."""
    flip = rng.uniform() < policy.p_flip
    side = max(img.shape[0], img.shape[1])
    dx, dy = rng.uniform(-1, 1, 2) * policy.max_shift * side
    scale = 1 + rng.uniform(-1, 1) * policy.max_scale_delta
    angle = rng.uniform(-1, 1) * policy.max_rotate
    beta = rng.uniform(-1, 1) * policy.max_brightness
    alpha = 1 + rng.uniform(-1, 1) * policy.max_contrast

    out = hflip(img) if flip else img
    out = shift_scale_rotate(out, float(dx), float(dy), float(scale), float(angle))
    return brightness_contrast(out, float(beta), float(alpha))
