"""ROC-AUC, accuracy, and fold aggregation in mean +/- std form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

METRICS = ("test_auc", "test_acc", "val_auc", "val_acc")


class UndefinedAUCError(ValueError):
    pass


def roc_auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted as 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores{scores.shape} and labels{labels.shape} differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_multiclass(probas, labels) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    With two probability columns this is the binary AUC of column 1.
    """
    probas = np.asarray(probas, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if probas.ndim != 2 or probas.shape[0] != labels.size:
        raise ValueError(f"probas{probas.shape} do not match {labels.size} labels")
    if probas.shape[1] == 2:
        return roc_auc_binary(probas[:, 1], labels)
    present = np.unique(labels)
    if present.size < 2:
        raise UndefinedAUCError("AUC needs at least two classes present")
    return float(np.mean([roc_auc_binary(probas[:, c], (labels == c).astype(int))
                          for c in present]))


def accuracy(predictions, labels) -> float:
    """Fraction correct. 2-D input is taken as probabilities and reduced by
    argmax (ties go to the lowest class index)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ValueError("accuracy of an empty sample")
    if predictions.ndim == 2:
        predictions = np.argmax(predictions, axis=1)
    return float(np.mean(predictions == labels))


@dataclass(frozen=True)
class FoldMetrics:
    test_auc: float
    test_acc: float
    val_auc: float
    val_acc: float


@dataclass(frozen=True)
class EvalReport:
    folds: tuple
    mean: dict
    std: dict

    def cell(self, metric: str) -> str:
        return f"{self.mean[metric]:.4f}±{self.std[metric]:.4f}"

    def row(self) -> dict:
        return {m: self.cell(m) for m in METRICS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", *METRICS])
        for i, f in enumerate(self.folds):
            w.writerow([i, *(f"{getattr(f, m):.6f}" for m in METRICS)])
        w.writerow(["mean", *(f"{self.mean[m]:.6f}" for m in METRICS)])
        w.writerow(["std", *(f"{self.std[m]:.6f}" for m in METRICS)])
        return buf.getvalue()

    def to_table(self, label: str = "Model") -> str:
        heads = ["Test AUC", "Test ACC", "Val AUC", "Val ACC"]
        cells = [self.cell(m) for m in METRICS]
        width = max(len(label), 5)
        lines = [" " * width + "  " + "  ".join(f"{h:<15}" for h in heads),
                 f"{label:<{width}}  " + "  ".join(f"{c:<15}" for c in cells)]
        return "\n".join(line.rstrip() for line in lines)


def aggregate(folds) -> EvalReport:
    """Mean and population std (denominator n) of each metric over folds."""
    folds = tuple(folds)
    if not folds:
        raise ValueError("aggregate needs at least one fold")
    table = np.array([[getattr(f, m) for m in METRICS] for f in folds], dtype=np.float64)
    mean = dict(zip(METRICS, table.mean(axis=0).tolist()))
    std = dict(zip(METRICS, table.std(axis=0).tolist()))
    return EvalReport(folds, mean, std)

