"""Segmentation metrics: Dice, Jaccard, symmetric Hausdorff (pixels) and MAE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class ClassScores:
    dsc: float
    jac: float
    hsd: float


@dataclass
class EvalReport:
    per_class: Dict[int, ClassScores] = field(default_factory=dict)
    mean_dsc: float = 0.0
    mean_jac: float = 0.0
    mean_hsd: float = 0.0
    mae: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): vars(v) for k, v in sorted(self.per_class.items())},
            "mean_dsc": self.mean_dsc,
            "mean_jac": self.mean_jac,
            "mean_hsd": self.mean_hsd,
            "mae": self.mae,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = {int(k): ClassScores(**v) for k, v in d["per_class"].items()}
        return cls(per, d["mean_dsc"], d["mean_jac"], d["mean_hsd"], d["mae"])


def dsc(pred, gt) -> float:
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def jac(pred, gt) -> float:
    a, b = np.asarray(pred, bool), np.asarray(gt, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary(mask) -> np.ndarray:
    """Mask pixels with an off-mask 4-neighbour or lying on the image edge."""
    m = np.asarray(mask, bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def hsd(pred, gt) -> float:
    """Symmetric Hausdorff distance between mask boundaries, Euclidean, in pixels.

    An empty mask on one side only scores the image diagonal; two empty
    masks score 0.
    """
    a, b = boundary(pred), boundary(gt)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return math.hypot(*a.shape)
    # exact Euclidean distance to the nearest boundary pixel of the other set
    dist_to_b = ndimage.distance_transform_edt(~b)
    dist_to_a = ndimage.distance_transform_edt(~a)
    return float(max(dist_to_b[a].max(), dist_to_a[b].max()))


def mae(pred, gt) -> float:
    return float(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)).mean())


def evaluate_predictions(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> EvalReport:
    """Aggregate per-image scores of hard label maps ``pred``/``gt`` (N x H x W).

    Per image and foreground class: skipped when absent from both maps,
    otherwise scored (a predicted class missing from the ground truth gets
    DSC = JAC = 0 and HSD = diagonal).  Per-class values are averaged over the
    images that scored them; the means run over classes that were scored at
    least once.  MAE compares the foreground/background binarisations.
    """
    acc: Dict[int, list] = {c: [] for c in range(1, num_classes)}
    maes = []
    for p, g in zip(pred, gt):
        for c in range(1, num_classes):
            pm, gm = p == c, g == c
            if not pm.any() and not gm.any():
                continue
            acc[c].append((dsc(pm, gm), jac(pm, gm), hsd(pm, gm)))
        maes.append(mae(p > 0, g > 0))
    per_class = {}
    for c, rows in acc.items():
        if rows:
            arr = np.array(rows)
            per_class[c] = ClassScores(*(float(v) for v in arr.mean(axis=0)))
    rep = EvalReport(per_class=per_class, mae=float(np.mean(maes)) if maes else 0.0)
    if per_class:
        rep.mean_dsc = float(np.mean([s.dsc for s in per_class.values()]))
        rep.mean_jac = float(np.mean([s.jac for s in per_class.values()]))
        rep.mean_hsd = float(np.mean([s.hsd for s in per_class.values()]))
    return rep


def evaluate(predict: Callable[[np.ndarray], np.ndarray], dataset, batch_size: int = 16) -> EvalReport:
    """Run ``predict`` (images -> N x L x H x W probabilities) over a dataset and score argmax maps."""
    preds = []
    for start in range(0, len(dataset), batch_size):
        probs = predict(dataset.images[start : start + batch_size].astype(np.float64))
        preds.append(np.argmax(probs, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros((0,) + dataset.labels.shape[1:], int)
    return evaluate_predictions(pred, dataset.labels, dataset.num_classes)
