"""Backbone building blocks: hard-swish, batch norm, squeeze-and-excite and
inverted-residual depthwise-separable blocks, assembled from a config."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]

ACTIVATIONS = ("relu6", "hard_swish")


@dataclass(frozen=True)
class BlockSpec:
    expansion_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    use_se: bool = True
    activation: str = "hard_swish"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"block stride must be 1 or 2, got {self.stride}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"block kernel_size must be odd, got {self.kernel_size}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.expansion_channels < 1 or self.out_channels < 1:
            raise ValueError("block channel counts must be positive")


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 64
    stem_channels: int = 8
    blocks: tuple[BlockSpec, ...] = field(default_factory=tuple)
    feature_dim: int = 64
    se_reduction: int = 4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.input_side < 1 or self.stem_channels < 1:
            raise ValueError("input_side and stem_channels must be positive")
        object.__setattr__(
            self, "blocks", tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BackboneConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backbone keys: {sorted(unknown)}")
        d = dict(d)
        if "blocks" in d:
            bad = [set(b) - set(BlockSpec.__dataclass_fields__) for b in d["blocks"]]
            if any(bad):
                raise ValueError(f"unknown block keys: {sorted(set().union(*bad))}")
            d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


def tiny_preset(input_side: int = 64) -> BackboneConfig:
    """Desk-scale preset: stem 8, four SE/hard-swish blocks, 64-d features."""
    return BackboneConfig(
        input_side=input_side,
        stem_channels=8,
        blocks=(
            BlockSpec(16, 12, 3, 2, True, "hard_swish"),
            BlockSpec(36, 12, 3, 1, True, "hard_swish"),
            BlockSpec(48, 24, 5, 2, True, "hard_swish"),
            BlockSpec(72, 24, 5, 1, True, "hard_swish"),
        ),
        feature_dim=64,
    )


def se_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(prefix: str, c: int) -> None:
        for suffix in ("scale", "shift", "running_mean", "running_var"):
            shapes[f"{prefix}.{suffix}"] = (c,)

    shapes["stem.conv"] = (config.stem_channels, 3, 3, 3)
    bn("stem.bn", config.stem_channels)
    cin = config.stem_channels
    for i, b in enumerate(config.blocks):
        p, e = f"block{i}", b.expansion_channels
        shapes[f"{p}.expand"] = (e, cin, 1, 1)
        bn(f"{p}.bn1", e)
        shapes[f"{p}.dw"] = (e, 1, b.kernel_size, b.kernel_size)
        bn(f"{p}.bn2", e)
        if b.use_se:
            r = se_width(e, config.se_reduction)
            shapes[f"{p}.se.w1"] = (e, r)
            shapes[f"{p}.se.b1"] = (r,)
            shapes[f"{p}.se.w2"] = (r, e)
            shapes[f"{p}.se.b2"] = (e,)
        shapes[f"{p}.project"] = (b.out_channels, e, 1, 1)
        bn(f"{p}.bn3", b.out_channels)
        cin = b.out_channels
    shapes["feature.weight"] = (cin, config.feature_dim)
    shapes["feature.bias"] = (config.feature_dim,)
    return shapes


def is_buffer(name: str) -> bool:
    """Running statistics are stored with params but never trained."""
    return name.endswith(".running_mean") or name.endswith(".running_var")


def init_params(config: BackboneConfig, seed: int = 0) -> Params:
    """Fan-in scaled uniform weights, unit BN scale, zero shifts and biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".scale") or name.endswith(".running_var"):
            value = np.ones(shape)
        elif name.endswith(".shift") or name.endswith(".running_mean") or len(shape) == 1:
            value = np.zeros(shape)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=not is_buffer(name))
    return params


def count_params(params: Params, trainable_only: bool = False) -> int:
    return int(sum(t.size for n, t in params.items() if not (trainable_only and is_buffer(n))))


def hard_sigmoid(t) -> Tensor:
    return ad.scalar_mul(ad.relu6(ad.add(t, 3.0)), 1.0 / 6.0)


def hard_swish(t) -> Tensor:
    t = ad._as_tensor(t)
    return ad.mul(t, hard_sigmoid(t))


def activation(t: Tensor, kind: str) -> Tensor:
    return hard_swish(t) if kind == "hard_swish" else ad.relu6(t)


def batch_norm(
    t: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    Train mode normalizes with the batch statistics (biased variance) and
    moves the running stats toward them, using the unbiased variance for
    the running estimate. Eval mode uses the running stats only.
    """
    if t.data.ndim != 4 or t.shape[1] != scale.shape[0]:
        raise ad.ShapeError(f"batch_norm: input {t.shape} does not match {scale.shape[0]} channels")
    n, c, h, w = t.shape
    col = (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data.astype(np.float64) + eps)
        a = ad.mul(scale, Tensor(inv, dtype=t.data.dtype))
        b = ad.sub(shift, ad.mul(a, Tensor(running_mean.data, dtype=t.data.dtype)))
        return ad.add(ad.mul(t, ad.reshape(a, col)), ad.reshape(b, col))
    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    avg = Tensor(np.full((1, n), 1.0 / n), dtype=t.data.dtype)
    mean = ad.reshape(ad.matmul(avg, ad.global_mean(t)), col)
    centered = ad.sub(t, mean)
    var = ad.reshape(ad.matmul(avg, ad.global_mean(ad.mul(centered, centered))), col)
    inv_std = ad.exp(ad.scalar_mul(ad.log(ad.add(var, eps)), -0.5))
    out = ad.add(ad.mul(ad.mul(centered, inv_std), ad.reshape(scale, col)), ad.reshape(shift, col))

    count = n * h * w
    unbiased = var.data.reshape(c) * (count / (count - 1) if count > 1 else 1.0)
    running_mean.data = ((1 - momentum) * running_mean.data + momentum * mean.data.reshape(c)).astype(
        running_mean.data.dtype
    )
    running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(running_var.data.dtype)
    return out


def se_block(t: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excite: gate channels by hard_sigmoid(W2 relu6(W1 mean(t)))."""
    n, c = t.shape[0], t.shape[1]
    if w1.shape[0] != c or w2.shape[1] != c or w1.shape[1] != w2.shape[0]:
        raise ad.ShapeError(f"se_block: input {t.shape} incompatible with weights {w1.shape}, {w2.shape}")
    s = ad.global_mean(t)
    hidden = ad.relu6(ad.add(ad.matmul(s, w1), b1))
    gate = hard_sigmoid(ad.add(ad.matmul(hidden, w2), b2))
    return ad.mul(t, ad.reshape(gate, (n, c, 1, 1)))


def _bn(t: Tensor, params: Params, prefix: str, mode: str, config: BackboneConfig) -> Tensor:
    return batch_norm(
        t,
        params[f"{prefix}.scale"],
        params[f"{prefix}.shift"],
        params[f"{prefix}.running_mean"],
        params[f"{prefix}.running_var"],
        mode,
        config.bn_momentum,
        config.bn_eps,
    )


def ds_block(
    t: Tensor,
    spec: BlockSpec,
    params: Params,
    index: int = 0,
    mode: str = "train",
    config: BackboneConfig | None = None,
) -> Tensor:
    config = config or BackboneConfig()
    p = f"block{index}"
    try:
        y = ad.conv2d(t, params[f"{p}.expand"])
        y = activation(_bn(y, params, f"{p}.bn1", mode, config), spec.activation)
        y = ad.conv2d(
            y, params[f"{p}.dw"], stride=spec.stride, pad=spec.kernel_size // 2, groups=spec.expansion_channels
        )
        y = activation(_bn(y, params, f"{p}.bn2", mode, config), spec.activation)
        if spec.use_se:
            y = se_block(y, params[f"{p}.se.w1"], params[f"{p}.se.b1"], params[f"{p}.se.w2"], params[f"{p}.se.b2"])
        y = ad.conv2d(y, params[f"{p}.project"])
        y = _bn(y, params, f"{p}.bn3", mode, config)
    except ad.ShapeError as exc:
        raise ad.ShapeError(f"block {index}: {exc}") from None
    if spec.stride == 1 and t.shape[1] == spec.out_channels:
        y = ad.add(y, t)
    return y


def backbone_forward(config: BackboneConfig, params: Params, batch, mode: str = "eval") -> Tensor:
    """Map an (N, 3, S, S) batch to (N, feature_dim) features."""
    x = ad._as_tensor(batch)
    s = config.input_side
    if x.data.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ad.ShapeError(f"backbone: expected input (N, 3, {s}, {s}), got {x.shape}")
    y = ad.conv2d(x, params["stem.conv"], stride=2, pad=1)
    y = hard_swish(_bn(y, params, "stem.bn", mode, config))
    for i, spec in enumerate(config.blocks):
        y = ds_block(y, spec, params, i, mode, config)
    pooled = ad.global_mean(y)
    return hard_swish(ad.add(ad.matmul(pooled, params["feature.weight"]), params["feature.bias"]))
