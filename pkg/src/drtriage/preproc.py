"""Deterministic fundus preprocessing.

retina mask -> largest 4-connected component -> minimum enclosing circle
-> circular crop -> Ben Graham background subtraction -> green-channel
CLAHE -> bilinear resize -> per-channel standardization.

Images are (H, W, 3) uint8 arrays in RGB order. All rounding is
round-half-up (floor(x + 0.5)).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PreprocessError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class NoRetinaError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class Circle(NamedTuple):
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class PreprocConfig:
    mask_threshold: int = 10
    margin_frac: float = 0.075
    sigma_ratio: float = 30.0
    bg_alpha: float = 4.0
    bg_bias: float = 128.0
    clahe_grid: int = 8
    clahe_clip: float = 2.0
    clahe_enabled: bool = True
    target_side: int = 64
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD
    strict_margin: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channel_mean", tuple(float(v) for v in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(v) for v in self.channel_std))
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValueError("channel_mean and channel_std need three entries")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError("channel_std entries must be positive")
        if not 0 <= self.mask_threshold <= 255:
            raise ValueError("mask_threshold must lie in 0..255")
        if self.margin_frac < 0:
            raise ValueError("margin_frac must be non-negative")
        if self.strict_margin and not 0.05 <= self.margin_frac <= 0.10:
            raise ValueError("strict_margin requires margin_frac within [0.05, 0.10]")
        if self.sigma_ratio <= 0 or self.target_side < 1 or self.clahe_grid < 1 or self.clahe_clip < 1:
            raise ValueError("invalid sigma_ratio, target_side, clahe_grid or clahe_clip")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mean"] = list(self.channel_mean)
        d["channel_std"] = list(self.channel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PreprocConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown preproc keys: {sorted(unknown)}")
        return cls(**d)


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(_round(x), 0, 255).astype(np.uint8)


def luma(img: np.ndarray) -> np.ndarray:
    """round(0.299 R + 0.587 G + 0.114 B), computed exactly in integers."""
    rgb = np.asarray(img, dtype=np.int64)
    return (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000


def retina_mask(img: np.ndarray, threshold: int = 10) -> np.ndarray:
    return luma(img) > threshold


_FOUR = ndimage.generate_binary_structure(2, 1)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """(row, col) points of the biggest 4-connected component.

    Labels are assigned in raster order of each component's first pixel, so
    taking the first maximum breaks size ties by the smallest (row, col) seed.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR)
    if n == 0:
        raise NoRetinaError("no retina found: mask is empty")
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    return np.argwhere(labels == best)


def _hull(pts: np.ndarray) -> np.ndarray:
    """Convex hull vertices (monotone chain); collinear points dropped."""
    pts = np.unique(pts, axis=0)
    if len(pts) <= 2:
        return pts

    def half(seq):
        out: list = []
        for p in seq:
            while len(out) >= 2:
                (ax, ay), (bx, by) = out[-2], out[-1]
                if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) <= 0:
                    out.pop()
                else:
                    break
            out.append((p[0], p[1]))
        return out

    seq = [tuple(p) for p in pts.tolist()]
    lower = half(seq)
    upper = half(reversed(seq))
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _circle2(a, b) -> Circle:
    cx, cy = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
    return Circle(cx, cy, max(math.hypot(a[0] - cx, a[1] - cy), math.hypot(b[0] - cx, b[1] - cy)))


def _circle3(a, b, c) -> Circle | None:
    ax, ay = a
    bx, by = b[0] - ax, b[1] - ay
    cx, cy = c[0] - ax, c[1] - ay
    d = 2 * (bx * cy - by * cx)
    if d == 0:
        return None
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    x, y = ax + ux, ay + uy
    r = max(math.hypot(x - p[0], y - p[1]) for p in (a, b, c))
    return Circle(x, y, r)


def _inside(c: Circle, p, tol: float) -> bool:
    return math.hypot(p[0] - c.cx, p[1] - c.cy) <= c.r + tol


def min_enclosing_circle(points) -> Circle:
    """Smallest circle containing all (x, y) points.

    Incremental randomized construction (Welzl) over the convex hull, with
    a fixed shuffle seed so results are reproducible.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise GeometryError("min_enclosing_circle of an empty point set")
    hull = _hull(pts) if len(pts) > 3 else np.unique(pts, axis=0)
    rng = np.random.Generator(np.random.PCG64(0))
    order = [tuple(p) for p in hull[rng.permutation(len(hull))].tolist()]
    scale = max(1.0, float(np.abs(pts).max()))
    tol = 1e-12 * scale

    c: Circle | None = None
    for i, p in enumerate(order):
        if c is not None and _inside(c, p, tol):
            continue
        c = Circle(p[0], p[1], 0.0)
        for j in range(i):
            q = order[j]
            if _inside(c, q, tol):
                continue
            c = _circle2(p, q)
            for k in range(j):
                s = order[k]
                if _inside(c, s, tol):
                    continue
                c3 = _circle3(p, q, s)
                if c3 is None:
                    far = max(((p, q), (p, s), (q, s)), key=lambda ab: math.dist(*ab))
                    c3 = _circle2(*far)
                c = c3
    assert c is not None
    return c


def circular_crop(img: np.ndarray, circle: Circle, margin_frac: float = 0.075) -> np.ndarray:
    """Square crop centred on the circle, side 2 * round(r * (1 + margin)).

    Pixels beyond the source bounds or outside the expanded circle are 0.
    """
    if not circle.r > 0:
        raise GeometryError("cannot crop around a circle of zero radius")
    R = circle.r * (1 + margin_frac)
    side = 2 * int(_round(R))
    if side < 2:
        side = 2
    h, w = img.shape[:2]
    oy = int(_round(circle.cy - (side - 1) / 2))
    ox = int(_round(circle.cx - (side - 1) / 2))
    out = np.zeros((side, side) + img.shape[2:], dtype=img.dtype)
    y0, y1 = max(oy, 0), min(oy + side, h)
    x0, x1 = max(ox, 0), min(ox + side, w)
    if y0 < y1 and x0 < x1:
        out[y0 - oy : y1 - oy, x0 - ox : x1 - ox] = img[y0:y1, x0:x1]
    yy, xx = np.mgrid[0:side, 0:side]
    outside = np.hypot(yy + oy - circle.cy, xx + ox - circle.cx) > R
    out[outside] = 0
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = (len(k) - 1) // 2
    n = a.shape[axis]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    # half-sample reflection (edge pixel repeated): every pixel has equal
    # weight in the periodic extension, so very wide blurs tend to the mean
    padded = np.pad(a, pad, mode="symmetric")
    out = np.zeros_like(a)
    for t, wt in enumerate(k):
        out += wt * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur (radius ceil(3 sigma), mirrored borders), float64 out."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel(sigma)
    a = np.asarray(img, dtype=np.float64)
    return _blur_axis(_blur_axis(a, k, 0), k, 1)


def ben_graham(img: np.ndarray, cfg: PreprocConfig = PreprocConfig()) -> np.ndarray:
    """clip(alpha * (I - blur(I)) + bias) with blur sigma = side / sigma_ratio."""
    side = max(img.shape[0], img.shape[1])
    a = np.asarray(img, dtype=np.float64)
    bg = gaussian_blur(a, side / cfg.sigma_ratio)
    return _to_u8(cfg.bg_alpha * (a - bg) + cfg.bg_bias)


def _tile_edges(n: int, grid: int) -> np.ndarray:
    return (np.arange(grid + 1) * n) // grid


def clahe_luts(channel: np.ndarray, grid: int, clip: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-tile float transfer functions (grid_y, grid_x, 256) and tile centres."""
    h, w = channel.shape
    if h < grid or w < grid:
        grid = 1
    ye, xe = _tile_edges(h, grid), _tile_edges(w, grid)
    luts = np.empty((grid, grid, 256))
    for i in range(grid):
        for j in range(grid):
            tile = channel[ye[i] : ye[i + 1], xe[j] : xe[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            if math.isfinite(clip):
                limit = clip * tile.size / 256
                excess = np.maximum(hist - limit, 0).sum()
                hist = np.minimum(hist, limit) + excess / 256
            luts[i, j] = 255.0 * np.cumsum(hist) / tile.size
    yc = (ye[:-1] + ye[1:] - 1) / 2
    xc = (xe[:-1] + xe[1:] - 1) / 2
    return luts, yc, xc


def _interp_index(pos: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i1 = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(i1 - 1, 0, len(centers) - 1)
    i1 = np.clip(i1, 0, len(centers) - 1)
    span = centers[i1] - centers[i0]
    f = np.where(span > 0, (pos - centers[i0]) / np.where(span > 0, span, 1), 0.0)
    return i0, i1, np.clip(f, 0.0, 1.0)


def clahe_green(img: np.ndarray, grid: int = 8, clip: float = 2.0) -> np.ndarray:
    """Clip-limited adaptive histogram equalization of the green channel only."""
    if grid < 1 or clip < 1:
        raise ValueError("clahe needs grid >= 1 and clip >= 1")
    g = img[..., 1]
    luts, yc, xc = clahe_luts(g, grid, clip)
    h, w = g.shape
    y0, y1, fy = _interp_index(np.arange(h, dtype=np.float64), yc)
    x0, x1, fx = _interp_index(np.arange(w, dtype=np.float64), xc)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    FY, FX = fy[:, None], fx[None, :]
    v = g.astype(np.int64)
    top = (1 - FX) * luts[Y0, X0, v] + FX * luts[Y0, X1, v]
    bot = (1 - FX) * luts[Y1, X0, v] + FX * luts[Y1, X1, v]
    out = img.copy()
    out[..., 1] = _to_u8((1 - FY) * top + FY * bot)
    return out


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to side x side, half-pixel centres, no corner alignment."""
    if side < 1:
        raise ValueError("side must be >= 1")
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        return img.copy()
    y0, y1, fy = _axis_weights(h, side)
    x0, x1, fx = _axis_weights(w, side)
    a = img.astype(np.float64)
    fx = fx[None, :, None] if a.ndim == 3 else fx[None, :]
    fy = fy[:, None, None] if a.ndim == 3 else fy[:, None]
    rows0 = a[y0]
    rows1 = a[y1]
    top = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    return _to_u8(top * (1 - fy) + bot * fy)


def to_tensor_normalized(img: np.ndarray, mean: Sequence[float] = IMAGENET_MEAN, std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 of (pixel / 255 - mean) / std."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std entries must be positive")
    x = np.asarray(img, dtype=np.float64) / 255.0
    return ((x - mean) / std).transpose(2, 0, 1).astype(np.float32)


@dataclass
class Stages:
    """Intermediate images captured when debugging the pipeline."""

    images: dict[str, np.ndarray] = field(default_factory=dict)
    circle: Circle | None = None


def preprocess_image(img: np.ndarray, cfg: PreprocConfig = PreprocConfig(), stages: Stages | None = None) -> np.ndarray:
    """Run every stage up to and including the resize; returns uint8 side x side x 3."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise PreprocessError("input", f"expected (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    stage = "localize"
    try:
        mask = retina_mask(img, cfg.mask_threshold)
        pts = largest_component(mask)
        circle = min_enclosing_circle(pts[:, ::-1])
        stage = "crop"
        cropped = circular_crop(img, circle, cfg.margin_frac)
        stage = "ben_graham"
        out = ben_graham(cropped, cfg)
        if stages is not None:
            stages.circle = circle
            stages.images["mask"] = (mask * 255).astype(np.uint8)
            stages.images["crop"] = cropped
            stages.images["ben_graham"] = out
        if cfg.clahe_enabled:
            stage = "clahe"
            out = clahe_green(out, cfg.clahe_grid, cfg.clahe_clip)
            if stages is not None:
                stages.images["clahe"] = out
        stage = "resize"
        out = resize_bilinear(out, cfg.target_side)
        if stages is not None:
            stages.images["resize"] = out
    except PreprocessError:
        raise
    except (ValueError, IndexError) as exc:
        raise PreprocessError(stage, str(exc)) from exc
    return out


def preprocess(img: np.ndarray, cfg: PreprocConfig = PreprocConfig(), stages: Stages | None = None) -> np.ndarray:
    """Full pipeline to a (3, target_side, target_side) float32 tensor."""
    out = preprocess_image(img, cfg, stages)
    try:
        return to_tensor_normalized(out, cfg.channel_mean, cfg.channel_std)
    except ValueError as exc:
        raise PreprocessError("normalize", str(exc)) from exc
