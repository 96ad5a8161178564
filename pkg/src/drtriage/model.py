"""A trainable classifier: backbone params plus a CORAL or softmax head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .coral import CoralHead, coral_logits
from .preproc import PreprocConfig


@dataclass
class SoftmaxHead:
    """K-way linear layer; the plain-classification ablation head."""

    weight: Tensor
    bias: Tensor

    @property
    def K(self) -> int:
        return self.bias.size

    @classmethod
    def init(cls, feature_dim: int, K: int = 5, seed: int = 0) -> SoftmaxHead:
        rng = np.random.Generator(np.random.PCG64(seed))
        bound = 1.0 / math.sqrt(feature_dim)
        return cls(
            Tensor(rng.uniform(-bound, bound, (feature_dim, K)), requires_grad=True),
            Tensor(np.zeros(K), requires_grad=True),
        )

    def params(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def softmax_logits(features, head: SoftmaxHead) -> Tensor:
    return ad.add(ad.matmul(ad._as_tensor(features), head.weight), head.bias)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of logsumexp(z) - z_y, with the row max subtracted as a constant."""
    y = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    shift = Tensor(logits.data.max(axis=1, keepdims=True), dtype=logits.data.dtype)
    z = ad.sub(logits, shift)
    lse = ad.log(ad.sum(ad.exp(z), axis=1))
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), y] = 1
    picked = ad.sum(ad.mul(z, Tensor(onehot, dtype=logits.data.dtype)), axis=1)
    return ad.scalar_mul(ad.sum(ad.sub(lse, picked)), 1.0 / n)


@dataclass
class Model:
    backbone: nn.BackboneConfig
    params: nn.Params
    head: CoralHead | SoftmaxHead
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    temperature: float = 1.0

    @property
    def kind(self) -> str:
        return "coral" if isinstance(self.head, CoralHead) else "softmax"

    @property
    def K(self) -> int:
        return self.head.K

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.head.params())
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors().items() if not nn.is_buffer(n)}

    def logits(self, batch, mode: str = "eval") -> Tensor:
        feats = nn.backbone_forward(self.backbone, self.params, batch, mode)
        if isinstance(self.head, CoralHead):
            return coral_logits(feats, self.head)
        return softmax_logits(feats, self.head)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.named_tensors().items():
            t.data = snap[n].copy()


def build_model(
    backbone: nn.BackboneConfig,
    head: str = "coral",
    K: int = 5,
    seed: int = 0,
    preproc: PreprocConfig | None = None,
) -> Model:
    ss = np.random.SeedSequence(seed)
    s_backbone, s_head = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    params = nn.init_params(backbone, s_backbone)
    if head == "coral":
        h: CoralHead | SoftmaxHead = CoralHead.init(backbone.feature_dim, K, s_head)
    elif head == "softmax":
        h = SoftmaxHead.init(backbone.feature_dim, K, s_head)
    else:
        raise ValueError(f"unknown head {head!r}")
    return Model(backbone, params, h, preproc or PreprocConfig())
