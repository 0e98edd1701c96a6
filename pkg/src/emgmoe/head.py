"""Classification head, patch-to-signal vote aggregation, and evaluation
metrics (confusion matrix, accuracies, rank-statistic ROC/AUC)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as tn
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


@dataclass
class HeadParams:
    norm_gain: Tensor  # (D_model,)
    norm_bias: Tensor  # (D_model,)
    projection: Tensor  # (D_model, G)
    bias: Tensor  # (G,)

    def __post_init__(self):
        if self.projection.shape[1] < 2:
            raise ConfigError("need at least 2 classes")

    @property
    def classes(self) -> int:
        return self.projection.shape[1]


def init_head_params(rng: np.random.Generator, d_model: int, classes: int) -> HeadParams:
    return HeadParams(
        norm_gain=Tensor(np.ones(d_model), requires_grad=True),
        norm_bias=Tensor(np.zeros(d_model), requires_grad=True),
        projection=Tensor(
            rng.standard_normal((d_model, classes)) / np.sqrt(d_model), requires_grad=True
        ),
        bias=Tensor(np.zeros(classes), requires_grad=True),
    )


def classify_patch(z: Tensor, params: HeadParams) -> Tensor:
    """softmax(proj(silu(affine(norm(z))))) for pooled embeddings (M, D)."""
    squeeze = z.ndim == 1
    if squeeze:
        z = tn.reshape(z, (1,) + z.shape)
    normed = tn.layer_norm(z, axis=-1)
    gain = tn.expand(tn.reshape(params.norm_gain, (1, -1)), normed.shape)
    bias = tn.expand(tn.reshape(params.norm_bias, (1, -1)), normed.shape)
    act = tn.silu(tn.add(tn.hadamard(normed, gain), bias))
    logits = tn.add(
        tn.matmul(act, params.projection),
        tn.expand(tn.reshape(params.bias, (1, -1)), (z.shape[0], params.classes)),
    )
    probs = tn.softmax(logits, axis=-1)
    return tn.reshape(probs, (params.classes,)) if squeeze else probs


def majority_vote(patch_probs: np.ndarray, source_ids: np.ndarray) -> dict[int, int]:
    """Signal-level label per source id from per-patch probabilities.

    Each patch votes its argmax; the modal class wins. Ties break on highest
    summed probability over the signal's patches, then lowest class index.
    """
    patch_probs = np.asarray(patch_probs, dtype=np.float64)
    source_ids = np.asarray(source_ids)
    if patch_probs.shape[0] != source_ids.shape[0]:
        raise ShapeError("one source id per patch required")
    result: dict[int, int] = {}
    for sid in np.unique(source_ids):
        mask = source_ids == sid
        probs = patch_probs[mask]
        if probs.shape[0] == 0:
            raise DataError(f"signal {sid} has no patches")
        votes = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
        best = votes.max()
        tied = np.nonzero(votes == best)[0]
        if tied.size == 1:
            result[int(sid)] = int(tied[0])
        else:
            sums = probs.sum(axis=0)[tied]
            result[int(sid)] = int(tied[np.argmax(sums)])  # argmax -> lowest index on ties
    return result


def confusion_and_accuracy(preds, labels, classes: int):
    """Confusion counts plus total and balanced (mean per-class recall)
    accuracy."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeError("prediction/label lists must have equal length")
    if labels.size and (labels.max() >= classes or labels.min() < 0):
        raise DataError(f"label outside [0, {classes})")
    if preds.size and (preds.max() >= classes or preds.min() < 0):
        raise DataError(f"prediction outside [0, {classes})")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    total = float(np.trace(confusion)) / max(labels.size, 1)
    recalls = []
    for g in range(classes):
        row = confusion[g].sum()
        if row:
            recalls.append(confusion[g, g] / row)
    balanced = float(np.mean(recalls)) if recalls else 0.0
    return confusion, total, balanced


def roc_auc(scores: np.ndarray, labels: np.ndarray, cls: int):
    """One-vs-rest AUC by the rank statistic with tie correction, plus ROC
    points at every distinct threshold.

    Returns (auc, points) where points is a list of (fpr, tpr); ``auc`` is
    ``None`` when the class is absent from the labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    s = scores[:, cls]
    pos = labels == cls
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None, []
    ranks = rankdata(s)  # average ranks handle ties
    auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    order = np.argsort(-s, kind="stable")
    sorted_pos = pos[order]
    sorted_s = s[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    distinct = np.nonzero(np.diff(sorted_s))[0]
    cut = np.concatenate([distinct, [labels.size - 1]])
    points = [(0.0, 0.0)] + [(fp[i] / n_neg, tp[i] / n_pos) for i in cut]
    return float(auc), points


@dataclass
class EvalReport:
    confusion: np.ndarray  # (G, G) signal-level counts
    per_class_auc: list  # G entries, float or None when a class is absent
    total_accuracy: float
    balanced_accuracy: float
    patch_accuracy: float
    patch_balanced_accuracy: float
    param_count: int
    flop_count: int
    roc_points: dict = field(default_factory=dict)  # class -> [(fpr, tpr)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "confusion": self.confusion.tolist(),
                "per_class_auc": self.per_class_auc,
                "total_accuracy": self.total_accuracy,
                "balanced_accuracy": self.balanced_accuracy,
                "patch_accuracy": self.patch_accuracy,
                "patch_balanced_accuracy": self.patch_balanced_accuracy,
                "param_count": self.param_count,
                "flop_count": self.flop_count,
            },
            indent=2,
        )

    def write_csv(self, confusion_path, roc_path):
        with open(confusion_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(range(self.confusion.shape[1])))
            for g, row in enumerate(self.confusion):
                writer.writerow([g] + row.tolist())
        with open(roc_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "fpr", "tpr"])
            for g, pts in self.roc_points.items():
                for fpr, tpr in pts:
                    writer.writerow([g, f"{fpr:.6f}", f"{tpr:.6f}"])
