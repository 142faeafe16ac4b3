"""Classification metrics: confusion matrix, top-k accuracy, P/R/F1, one-vs-rest ROC-AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower class index."""
    probs = np.asarray(probs)
    if not 1 <= k <= probs.shape[-1]:
        raise ValueError(f"k must be in [1, {probs.shape[-1]}], got {k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """``K x K`` counts, rows are true classes and columns predicted classes."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        bad = (arr < 0) | (arr >= num_classes)
        if bad.any():
            raise ValueError(f"{name} label {arr[bad][0]} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    y_true = np.asarray(y_true)
    return float(np.mean(y_true == np.asarray(y_pred))) if y_true.size else 0.0


def topk_accuracy(probs: np.ndarray, y_true: Sequence[int], k: int) -> float:
    """Share of rows whose true class is among the ``k`` highest scores."""
    probs = np.asarray(probs)
    y_true = np.asarray(y_true, dtype=int)
    top = topk_indices(probs, k)
    return float(np.mean((top == y_true[:, None]).any(axis=1)))


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    total = precision + recall
    return 0.0 if total == 0 else 2.0 * precision * recall / total


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def precision_recall_f1(cm: np.ndarray) -> dict[str, np.ndarray | float]:
    """Per-class and macro precision, recall and F1 from a confusion matrix.

    Empty denominators give 0.  ``aggregate_f1`` is the harmonic combination
    of macro precision and macro recall.
    """
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    macro_p, macro_r = float(precision.mean()), float(recall.mean())
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": cm.sum(axis=1),
        "macro_precision": macro_p,
        "macro_recall": macro_r,
        "macro_f1": float(f1.mean()),
        "aggregate_f1": f1_score(macro_p, macro_r),
    }


def binary_auc(positive_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """P(positive > negative) + P(tie) / 2, from rank sums with averaged ties."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def roc_auc(scores: np.ndarray, y_true: Sequence[int]) -> list[float | None]:
    """One-vs-rest AUC per class; ``None`` where a class has no positives or no negatives."""
    scores = np.asarray(scores)
    y_true = np.asarray(y_true, dtype=int)
    out: list[float | None] = []
    for c in range(scores.shape[1]):
        is_pos = y_true == c
        if is_pos.all() or not is_pos.any():
            out.append(None)
        else:
            out.append(binary_auc(scores[is_pos, c], scores[~is_pos, c]))
    return out


def roc_curve(scores: Sequence[float], is_positive: Sequence[bool]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with thresholds descending, starting at +inf."""
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], is_positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(p)[distinct]
    fps = np.cumsum(~p)[distinct]
    n_pos, n_neg = max(p.sum(), 1), max((~p).sum(), 1)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr, np.r_[np.inf, s[distinct]]


@dataclass
class MetricsReport:
    class_names: list[str]
    top1: float
    top2: float
    confusion_matrix: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro: dict[str, float]
    aggregate_f1: float
    auc: list[float | None]
    num_samples: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "top1": self.top1,
            "top2": self.top2,
            "per_class": {
                name: {
                    "precision": float(self.precision[i]),
                    "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]),
                    "support": int(self.support[i]),
                }
                for i, name in enumerate(self.class_names)
            },
            "macro": dict(self.macro),
            "aggregate_f1": self.aggregate_f1,
            "auc": {name: self.auc[i] for i, name in enumerate(self.class_names)},
            "confusion_matrix": self.confusion_matrix.tolist(),
            "class_names": list(self.class_names),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_text(self) -> str:
        width = max(8, *(len(n) for n in self.class_names))
        lines = [
            f"samples {self.num_samples}   top-1 {self.top1:.4f}   top-2 {self.top2:.4f}",
            "",
            f"{'class':<{width}} {'prec':>7} {'recall':>7} {'f1':>7} {'auc':>7} {'support':>8}",
        ]
        for i, name in enumerate(self.class_names):
            auc = "n/a" if self.auc[i] is None else f"{self.auc[i]:.4f}"
            lines.append(
                f"{name:<{width}} {self.precision[i]:7.4f} {self.recall[i]:7.4f} {self.f1[i]:7.4f} {auc:>7} {int(self.support[i]):8d}"
            )
        m = self.macro
        lines.append(f"{'macro':<{width}} {m['precision']:7.4f} {m['recall']:7.4f} {m['f1']:7.4f}")
        lines.append(f"aggregate F1 (from macro P and R): {self.aggregate_f1:.4f}")
        lines.append("")
        lines.append("confusion matrix (rows = true, columns = predicted)")
        lines.append(" " * width + " " + " ".join(f"{n:>6}" for n in self.class_names))
        for name, row in zip(self.class_names, self.confusion_matrix):
            lines.append(f"{name:<{width}} " + " ".join(f"{int(v):6d}" for v in row))
        return "\n".join(lines)


def compute_report(probs: np.ndarray, y_true: Sequence[int], class_names: Sequence[str] | None = None) -> MetricsReport:
    """Every metric from one array of class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=int)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a non-empty [N, K] probability array")
    if len(probs) != len(y_true):
        raise ValueError(f"{len(probs)} predictions but {len(y_true)} labels")
    K = probs.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(K)]
    y_pred = topk_indices(probs, 1)[:, 0]
    cm = confusion_matrix(y_true, y_pred, K)
    prf = precision_recall_f1(cm)
    return MetricsReport(
        class_names=names,
        top1=topk_accuracy(probs, y_true, 1),
        top2=topk_accuracy(probs, y_true, min(2, K)),
        confusion_matrix=cm,
        precision=prf["precision"],
        recall=prf["recall"],
        f1=prf["f1"],
        support=prf["support"],
        macro={"precision": prf["macro_precision"], "recall": prf["macro_recall"], "f1": prf["macro_f1"]},
        aggregate_f1=prf["aggregate_f1"],
        auc=roc_auc(probs, y_true),
        num_samples=len(y_true),
    )


def report(model, images: np.ndarray, y_true: Sequence[int], class_names: Sequence[str] | None = None) -> MetricsReport:
    """Evaluate ``model`` in one eval-mode pass over ``images``."""
    from .model import predict_proba

    if len(images) == 0:
        raise ValueError("test set is empty")
    return compute_report(predict_proba(model, images), y_true, class_names)


def roc_csv_rows(probs: np.ndarray, y_true: Sequence[int], class_names: Sequence[str]):
    """``(class, fpr, tpr, threshold)`` rows for every class with both outcomes present."""
    probs = np.asarray(probs)
    y_true = np.asarray(y_true, dtype=int)
    for c, name in enumerate(class_names):
        pos = y_true == c
        if pos.all() or not pos.any():
            continue
        fpr, tpr, thr = roc_curve(probs[:, c], pos)
        for f, t, h in zip(fpr, tpr, thr):
            yield name, float(f), float(t), float(h)
