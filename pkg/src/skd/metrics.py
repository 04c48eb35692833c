"""Top-1 accuracy and mean IoU with exact integer accounting.

IoU is accumulated into a single confusion matrix over the whole evaluation
set (not averaged per image). Classes absent from both prediction and ground
truth are excluded from the mean; pixels labelled with the ignore index are
excluded everywhere. This convention is attached to every metric report.
"""

from __future__ import annotations

import numpy as np

IOU_CONVENTION = "dataset-level confusion matrix; absent classes and ignore-index pixels excluded"


def _as_int_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if hasattr(x, "detach"):  # torch tensor
        arr = x.detach().cpu().numpy()
    return arr.astype(np.int64, copy=False)


def top1_accuracy(predictions, labels) -> float:
    """Fraction of predictions equal to their label. Exact ratio of counts."""
    preds = _as_int_array(predictions).ravel()
    labs = _as_int_array(labels).ravel()
    if preds.shape != labs.shape:
        raise ValueError(f"predictions and labels differ in length: {preds.shape} vs {labs.shape}")
    if preds.size == 0:
        raise ValueError("cannot compute accuracy of an empty prediction set")
    return float(int((preds == labs).sum()) / preds.size)


class ConfusionMatrix:
    """C x C integer counts, rows = ground truth, cols = prediction.

    Supports streaming accumulation and merging; merged partial matrices
    give exactly the same counts as one-shot accumulation.
    """

    def __init__(self, num_classes: int, ignore_index: int | None = None):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, labels, predictions) -> None:
        labs = _as_int_array(labels).ravel()
        preds = _as_int_array(predictions).ravel()
        if labs.shape != preds.shape:
            raise ValueError(f"shape mismatch: labels {labs.shape} vs predictions {preds.shape}")
        if self.ignore_index is not None:
            keep = labs != self.ignore_index
            self.ignored += int((~keep).sum())
            labs, preds = labs[keep], preds[keep]
        if labs.size and (labs.min() < 0 or labs.max() >= self.num_classes):
            bad = labs[(labs < 0) | (labs >= self.num_classes)][0]
            raise ValueError(f"invalid label {bad} for {self.num_classes} classes")
        if preds.size and (preds.min() < 0 or preds.max() >= self.num_classes):
            bad = preds[(preds < 0) | (preds >= self.num_classes)][0]
            raise ValueError(f"invalid prediction {bad} for {self.num_classes} classes")
        flat = self.num_classes * labs + preds
        binc = np.bincount(flat, minlength=self.num_classes**2)
        self.counts += binc.reshape(self.num_classes, self.num_classes)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise addition; associative and commutative."""
        if other.num_classes != self.num_classes or other.ignore_index != self.ignore_index:
            raise ValueError("cannot merge confusion matrices with different class setups")
        self.counts += other.counts
        self.ignored += other.ignored
        return self

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both axes."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = tp / union
        iou[union == 0] = np.nan
        return iou

    def mean_iou(self) -> float:
        if self.counts.sum() == 0:
            raise ValueError("no valid pixels accumulated (all ignored or empty)")
        iou = self.per_class_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise ValueError("no class present in either prediction or ground truth")
        return float(iou[present].mean())


def mean_iou(predicted_masks, label_masks, num_classes: int, ignore_index: int | None = None) -> float:
    """Mean IoU over the whole mask set from one accumulated confusion matrix."""
    preds = _as_int_array(predicted_masks)
    labs = _as_int_array(label_masks)
    if preds.shape != labs.shape:
        raise ValueError(f"shape mismatch: predictions {preds.shape} vs labels {labs.shape}")
    cm = ConfusionMatrix(num_classes, ignore_index=ignore_index)
    cm.update(labs, preds)
    return cm.mean_iou()
