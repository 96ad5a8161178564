"""Training: inverse-frequency sampling, Adam, early stopping on validation
QWK, stratified cross-validation and the CORAL-vs-softmax ablation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import coral, metrics
from .augment import AugmentPolicy, augment
from .dataset import Manifest, load_pixels, stratified_folds
from .model import Model, build_model, softmax_cross_entropy
from .nn import BackboneConfig
from .preproc import PreprocConfig, preprocess_image, to_tensor_normalized

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    smoothing_epsilon: float = 0.05
    seed: int = 0
    head: str = "coral"
    folds: int = 3

    def __post_init__(self):
        if not self.learning_rate > 0 or not self.adam_eps > 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, epochs and batch_size must be >= 1")
        if self.head not in ("coral", "softmax"):
            raise ValueError(f"head must be 'coral' or 'softmax', got {self.head!r}")
        if not 0 <= self.smoothing_epsilon < 1:
            raise ValueError("smoothing_epsilon must lie in [0, 1)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c = N / (K_present * n_c); absent classes get weight 0."""
    c = np.asarray(counts, dtype=np.float64)
    present = c > 0
    if not present.any():
        raise ValueError("class_weights: all counts are zero")
    w = np.zeros_like(c)
    w[present] = c.sum() / (present.sum() * c[present])
    return w


def weighted_sample(weights, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with replacement, P(i) proportional to weights[i].

    Inverse-CDF on uniform variates: index = #{j : cdf_j <= u}.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weighted_sample: all weights are zero")
    cdf = np.cumsum(w) / total
    idx = np.searchsorted(cdf, rng.uniform(size=n_draws), side="right")
    last = int(np.flatnonzero(w)[-1])
    return np.minimum(idx, last)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> AdamState:
    """In-place Adam update of every param that has a gradient."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        p.data = (p.data - step).astype(p.data.dtype)
    return state


class EarlyStopper:
    """Tracks the best score; ``update`` returns True once patience runs out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, score: float | None) -> bool:
        if score is not None and (self.best is None or score > self.best):
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class PreparedSet:
    """Preprocessed 8-bit images with labels, ready for batching."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> PreparedSet:
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedSet([self.ids[i] for i in idx], self.images[idx], self.labels[idx])


def prepare(manifest: Manifest, cfg: PreprocConfig, workers: int = 1) -> PreparedSet:
    """Load and preprocess every sample; order follows the manifest."""

    def one(sample):
        return preprocess_image(load_pixels(sample), cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            imgs = list(pool.map(one, manifest.samples))
    else:
        imgs = [one(s) for s in manifest.samples]
    shape = (0, cfg.target_side, cfg.target_side, 3)
    return PreparedSet(
        [s.id for s in manifest.samples],
        np.stack(imgs) if imgs else np.zeros(shape, np.uint8),
        manifest.labels,
    )


def to_batch(images: np.ndarray, cfg: PreprocConfig) -> np.ndarray:
    return np.stack([to_tensor_normalized(im, cfg.channel_mean, cfg.channel_std) for im in images])


@dataclass
class Predictions:
    ids: list[str]
    labels: np.ndarray
    grades: np.ndarray
    logits: np.ndarray
    K: int = 5

    @property
    def kind(self) -> str:
        return "coral" if self.logits.shape[1] == self.K - 1 else "softmax"

    @property
    def cum_probs(self) -> np.ndarray | None:
        return coral._sigmoid(self.logits) if self.kind == "coral" else None

    def records(self) -> list[metrics.PredictionRecord]:
        probs = self.cum_probs
        return [
            metrics.PredictionRecord(
                sid,
                int(self.labels[i]),
                int(self.grades[i]),
                tuple(float(v) for v in probs[i]) if probs is not None else (),
            )
            for i, sid in enumerate(self.ids)
        ]


def predict(model: Model, data: PreparedSet, batch_size: int = 64) -> Predictions:
    """Eval-mode forward without recording a graph."""
    chunks = []
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            x = to_batch(data.images[start : start + batch_size], model.preproc)
            chunks.append(model.logits(x, "eval").data.astype(np.float64))
    logits = np.concatenate(chunks) if chunks else np.zeros((0, model.K - 1 if model.kind == "coral" else model.K))
    if model.kind == "coral":
        grades = coral.decode(logits)[0] if len(logits) else np.zeros(0, np.int64)
    else:
        grades = np.argmax(logits, axis=1)
    return Predictions(list(data.ids), data.labels.copy(), np.asarray(grades, dtype=np.int64), logits, model.K)


def evaluate_predictions(pred: Predictions) -> dict:
    cm = metrics.confusion(pred.grades, pred.labels, pred.K)
    try:
        kappa = metrics.qwk(cm)
    except metrics.UndefinedMetricError:
        kappa = None
    return {"qwk": kappa, "accuracy": metrics.accuracy(cm), "mae": metrics.mean_abs_error(cm)}


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_qwk: float
    best_accuracy: float
    best_mae: float
    snapshot: dict[str, np.ndarray]
    trace: list[dict]
    predictions: Predictions | None = None

    def summary(self) -> dict:
        return {
            "fold": self.fold,
            "best_epoch": self.best_epoch,
            "best_qwk": self.best_qwk,
            "best_accuracy": self.best_accuracy,
            "best_mae": self.best_mae,
            "epochs_run": len(self.trace),
        }


def _loss(model: Model, logits: ad.Tensor, labels: np.ndarray, cfg: TrainConfig) -> ad.Tensor:
    if model.kind == "coral":
        t = coral.smooth(coral.cumulative_targets(labels, model.K), cfg.smoothing_epsilon)
        return coral.coral_loss(logits, t)
    return softmax_cross_entropy(logits, labels)


def train_fold(
    train_set: PreparedSet,
    val_set: PreparedSet,
    backbone: BackboneConfig,
    cfg: TrainConfig,
    preproc: PreprocConfig | None = None,
    policy: AugmentPolicy | None = None,
    fold: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[FoldResult, Model]:
    """Train on one split; return the best-QWK epoch's snapshot and model."""
    preproc = preproc or PreprocConfig()
    policy = policy or AugmentPolicy()
    if set(train_set.ids) & set(val_set.ids):
        raise ValueError("train and validation sets overlap")
    if len(np.unique(val_set.labels)) < 2:
        raise ValueError("validation set needs at least two grades")

    ss = np.random.SeedSequence([cfg.seed, fold])
    s_init, s_sample, s_aug = ss.spawn(3)
    model = build_model(backbone, cfg.head, 5, int(s_init.generate_state(1)[0]), preproc)
    sampler_rng = np.random.Generator(np.random.PCG64(s_sample))
    aug_rng = np.random.Generator(np.random.PCG64(s_aug))

    counts = np.bincount(train_set.labels, minlength=model.K)
    per_sample = class_weights(counts)[train_set.labels]
    trainable = model.trainable()
    state = AdamState()
    stopper = EarlyStopper(cfg.patience)
    best_snapshot = model.snapshot()
    best_eval: dict = {"qwk": None, "accuracy": 0.0, "mae": float("nan")}
    best_pred: Predictions | None = None
    trace: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        order = weighted_sample(per_sample, len(train_set), sampler_rng)
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            imgs = [augment(train_set.images[i], policy, aug_rng) for i in idx]
            x = to_batch(np.stack(imgs), preproc)
            for t in trainable.values():
                t.grad = None
            loss = _loss(model, model.logits(x, "train"), train_set.labels[idx], cfg)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at fold {fold}, epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(trainable, {n: t.grad for n, t in trainable.items()}, state, cfg)
            losses.append(loss.item())

        pred = predict(model, val_set)
        ev = evaluate_predictions(pred)
        record = {
            "fold": fold,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_qwk": ev["qwk"],
            "val_accuracy": ev["accuracy"],
            "val_mae": ev["mae"],
        }
        trace.append(record)
        if on_epoch:
            on_epoch(record)
        log.info("fold %d epoch %d loss %.4f qwk %s acc %.4f", fold, epoch, record["train_loss"], ev["qwk"], ev["accuracy"])
        stop = stopper.update(epoch, ev["qwk"])
        if stopper.best_epoch == epoch:
            best_snapshot, best_eval, best_pred = model.snapshot(), ev, pred
        if stop:
            break

    model.load_snapshot(best_snapshot)
    result = FoldResult(
        fold=fold,
        best_epoch=stopper.best_epoch,
        best_qwk=best_eval["qwk"] if best_eval["qwk"] is not None else float("nan"),
        best_accuracy=best_eval["accuracy"],
        best_mae=best_eval["mae"],
        snapshot=best_snapshot,
        trace=trace,
        predictions=best_pred,
    )
    return result, model


def mean_std(values: Sequence[float]) -> dict:
    """Population mean and standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


@dataclass
class CVResult:
    folds: list[FoldResult]
    models: list[Model]
    assignment: np.ndarray

    def summary(self) -> dict:
        return {
            "qwk": mean_std([f.best_qwk for f in self.folds]),
            "accuracy": mean_std([f.best_accuracy for f in self.folds]),
            "mae": mean_std([f.best_mae for f in self.folds]),
            "folds": [f.summary() for f in self.folds],
        }

    def out_of_fold(self) -> Predictions:
        """Best-epoch validation predictions of every fold, concatenated."""
        preds = [f.predictions for f in self.folds if f.predictions is not None]
        return Predictions(
            [i for p in preds for i in p.ids],
            np.concatenate([p.labels for p in preds]),
            np.concatenate([p.grades for p in preds]),
            np.concatenate([p.logits for p in preds]),
            preds[0].K,
        )

    def best_fold(self) -> int:
        return int(np.argmax([f.best_qwk for f in self.folds]))


def cross_validate(
    data: PreparedSet,
    backbone: BackboneConfig,
    cfg: TrainConfig,
    preproc: PreprocConfig | None = None,
    policy: AugmentPolicy | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> CVResult:
    assignment = stratified_folds(data.labels, cfg.folds, cfg.seed)
    folds, models = [], []
    for f in range(cfg.folds):
        tr = data.subset(np.flatnonzero(assignment != f))
        va = data.subset(np.flatnonzero(assignment == f))
        res, model = train_fold(tr, va, backbone, cfg, preproc, policy, f, on_epoch)
        folds.append(res)
        models.append(model)
    return CVResult(folds, models, assignment)


def ablate(
    data: PreparedSet,
    backbone: BackboneConfig,
    cfg: TrainConfig,
    seeds: Sequence[int],
    preproc: PreprocConfig | None = None,
    policy: AugmentPolicy | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> dict:
    """CORAL and softmax heads on identical folds and seeds."""
    from dataclasses import replace

    report: dict = {"seeds": list(seeds), "coral": [], "softmax": []}
    for seed in seeds:
        for head in ("coral", "softmax"):
            res = cross_validate(data, backbone, replace(cfg, seed=seed, head=head), preproc, policy, on_epoch)
            s = res.summary()
            s["seed"] = seed
            report[head].append(s)
    for head in ("coral", "softmax"):
        report[f"{head}_mean"] = {
            m: float(np.mean([s[m]["mean"] for s in report[head]])) for m in ("qwk", "accuracy", "mae")
        }
    return report
