"""Evaluation metrics: confusion matrix, quadratic weighted kappa, accuracy,
pooled cumulative ECE and worst-prediction ranking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative DR")


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. zero denominator)."""


def confusion(preds, labels, K: int = 5) -> np.ndarray:
    """K x K counts; rows are true grades, columns predictions."""
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"preds and labels differ in length: {p.size} vs {y.size}")
    for name, arr in (("pred", p), ("label", y)):
        bad = np.flatnonzero((arr < 0) | (arr >= K))
        if bad.size:
            raise ValueError(f"{name} at index {int(bad[0])} is {int(arr[bad[0]])}, outside 0..{K - 1}")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def qwk(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    K = cm.shape[0]
    n = cm.sum()
    if n <= 0:
        raise UndefinedMetricError("qwk of an empty confusion matrix")
    idx = np.arange(K)
    w = (idx[:, None] - idx[None, :]) ** 2 / (K - 1) ** 2
    observed = cm / n
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n**2
    denom = float((w * expected).sum())
    if denom == 0:
        raise UndefinedMetricError("qwk undefined: both marginals concentrated on one grade")
    return 1.0 - float((w * observed).sum()) / denom


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    n = cm.sum()
    if n == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return float(np.trace(cm) / n)


def per_class_recall(cm) -> list[float | None]:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    return [float(cm[i, i] / rows[i]) if rows[i] else None for i in range(cm.shape[0])]


def mean_abs_error(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n == 0:
        raise UndefinedMetricError("mean absolute error of an empty confusion matrix")
    idx = np.arange(cm.shape[0])
    return float((np.abs(idx[:, None] - idx[None, :]) * cm).sum() / n)


def adjacency_fraction(cm) -> float:
    """Share of misclassifications that land one grade away."""
    cm = np.asarray(cm)
    idx = np.arange(cm.shape[0])
    dist = np.abs(idx[:, None] - idx[None, :])
    errors = cm[dist > 0].sum()
    if errors == 0:
        raise UndefinedMetricError("adjacency fraction needs at least one error")
    return float(cm[dist == 1].sum() / errors)


def ece_cumulative(probs, targets, bins: int = 15) -> float:
    """Expected calibration error pooled over every (sample, threshold) task."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("probs and targets differ in shape")
    if p.size == 0:
        return 0.0
    which = np.minimum((p * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        sel = which == b
        nb = int(sel.sum())
        if nb:
            total += nb / p.size * abs(p[sel].mean() - t[sel].mean())
    return float(total)


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    label: int
    grade: int
    probs: tuple[float, ...]

    @property
    def error(self) -> int:
        return abs(self.grade - self.label)

    @property
    def proximity(self) -> float:
        """Mean closeness of the cumulative probs to their own decoded 0/1 pattern."""
        if not self.probs:
            return 1.0
        p = np.asarray(self.probs)
        return float(np.mean(1.0 - np.abs(p - (p > 0.5))))


def worst_k(records: Sequence[PredictionRecord], k: int = 10) -> list[PredictionRecord]:
    """Largest grade errors first; then the least decisive; then id order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(records, key=lambda r: (-r.error, r.proximity, r.id))
    return ranked[:k]


@dataclass
class MetricsReport:
    qwk: float
    accuracy: float
    recall: list[float | None]
    ece: float | None
    mae: float
    adjacency: float | None
    confusion: list[list[int]]
    worst: list[PredictionRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "qwk": self.qwk,
            "accuracy": self.accuracy,
            "per_class_recall": self.recall,
            "ece": self.ece,
            "mean_abs_error": self.mae,
            "adjacency_fraction": self.adjacency,
            "confusion": self.confusion,
            "worst": [
                {"id": r.id, "label": r.label, "grade": r.grade, "probs": list(r.probs)} for r in self.worst
            ],
        }


def build_report(records: Sequence[PredictionRecord], K: int = 5, worst: int = 10, bins: int = 15) -> MetricsReport:
    preds = [r.grade for r in records]
    labels = [r.label for r in records]
    cm = confusion(preds, labels, K)
    try:
        adj = adjacency_fraction(cm)
    except UndefinedMetricError:
        adj = None
    ece = None
    if records and all(len(r.probs) == K - 1 for r in records):
        from .coral import cumulative_targets

        probs = np.array([r.probs for r in records])
        ece = ece_cumulative(probs, cumulative_targets(np.array(labels), K), bins)
    return MetricsReport(
        qwk=qwk(cm),
        accuracy=accuracy(cm),
        recall=per_class_recall(cm),
        ece=ece,
        mae=mean_abs_error(cm),
        adjacency=adj,
        confusion=cm.tolist(),
        worst=worst_k(records, worst) if records else [],
    )


def render_text(report: MetricsReport) -> str:
    """Aligned confusion grid with grade names, then the headline metrics."""
    cm = np.asarray(report.confusion)
    K = cm.shape[0]
    names = list(GRADE_NAMES[:K]) if K <= len(GRADE_NAMES) else [str(i) for i in range(K)]
    width = max(max(len(n) for n in names), len(str(cm.max())) if cm.size else 1) + 2
    head = " " * width + "".join(n.rjust(width) for n in names)
    lines = ["confusion (rows = true grade, columns = predicted grade)", head]
    for i, n in enumerate(names):
        lines.append(n.ljust(width) + "".join(str(int(v)).rjust(width) for v in cm[i]))
    lines.append("")

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    lines.append(f"qwk = {fmt(report.qwk)}")
    lines.append(f"accuracy = {fmt(report.accuracy)}")
    lines.append(f"mean_abs_error = {fmt(report.mae)}")
    lines.append(f"adjacency_fraction = {fmt(report.adjacency)}")
    lines.append(f"ece = {fmt(report.ece)}")
    lines.append("per_class_recall = " + ", ".join(fmt(r) for r in report.recall))
    if report.worst:
        lines.append("")
        lines.append(f"worst {len(report.worst)} predictions:")
        for r in report.worst:
            probs = " ".join(f"{p:.3f}" for p in r.probs)
            lines.append(f"  {r.id}  label={r.label}  grade={r.grade}  probs=[{probs}]")
    return "\n".join(lines) + "\n"
