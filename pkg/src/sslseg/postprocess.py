"""Mask clean-up and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from .raster_io import LabelMask

__all__ = [
    "ConfusionCounts",
    "disc_footprint",
    "majority_filter",
    "erode_binary",
    "building_mask",
    "postprocess_buildings",
    "confusion",
    "metrics",
    "csi_from_f1",
    "f1_from_pr",
]


def disc_footprint(radius, shape="disc"):
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    if shape == "square":
        return np.ones_like(yy, dtype=bool)
    if shape != "disc":
        raise ValueError(f"vote shape must be 'disc' or 'square', got {shape!r}")
    return xx**2 + yy**2 <= radius**2


def _window_counts(indicator, footprint):
    # exact integer neighbourhood counts; FFT error is far below 0.5
    counts = fftconvolve(indicator.astype(np.float64), footprint.astype(np.float64), mode="same")
    return np.rint(counts).astype(np.int64)


def majority_filter(mask, radius=21, shape="disc"):
    """Replace every pixel by the most frequent class within ``radius``.

    Neighbourhoods are truncated at the image border.  When several classes
    share the top count the pixel keeps its original value.
    """
    if radius < 1:
        raise ValueError("radius must be ≥ 1")
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    fp = disc_footprint(radius, shape)
    classes = np.unique(labels)
    if classes.size == 1:
        return LabelMask(labels.copy())
    counts = np.stack([_window_counts(labels == k, fp) for k in classes])
    best = counts.max(axis=0)
    winners = (counts == best).sum(axis=0)
    out = classes[np.argmax(counts, axis=0)]
    out = np.where(winners > 1, labels, out)
    return LabelMask(out.astype(labels.dtype))


def erode_binary(mask, window=7):
    """Binary erosion with a square window; outside the image counts as 0."""
    if window % 2 != 1 or window < 1:
        raise ValueError("erosion window must be odd")
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    out = ndimage.binary_erosion(
        labels > 0, structure=np.ones((window, window), dtype=bool), border_value=0
    )
    return LabelMask(out.astype(np.uint8))


def building_mask(pred, building_class=1):
    labels = pred.labels if isinstance(pred, LabelMask) else np.asarray(pred)
    return LabelMask((labels == building_class).astype(np.uint8))


def postprocess_buildings(pred, radius=21, window=7, shape="disc", building_class=1):
    """Building class only, then majority vote, then erosion."""
    return erode_binary(majority_filter(building_mask(pred, building_class), radius, shape), window)


@dataclass
class ConfusionCounts:
    """One-vs-rest counts; arrays indexed by class position in ``classes``."""

    classes: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def confusion(pred, truth, eval_idx=None, classes=None):
    """Per-class counts over the evaluated pixels.

    ``eval_idx`` is a boolean mask or flat pixel indices; by default every
    pixel whose truth is nonzero is evaluated.
    """
    p = pred.labels if isinstance(pred, LabelMask) else np.asarray(pred)
    t = truth.labels if isinstance(truth, LabelMask) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"mask size mismatch: {p.shape} vs {t.shape}")
    p, t = p.ravel(), t.ravel()
    if eval_idx is None:
        sel = np.flatnonzero(t > 0)
    else:
        eval_idx = np.asarray(eval_idx)
        sel = np.flatnonzero(eval_idx.ravel()) if eval_idx.dtype == bool else eval_idx.ravel()
    p, t = p[sel], t[sel]
    if classes is None:
        classes = np.unique(t[t > 0])
    classes = np.asarray(classes)
    tp = np.array([np.sum((p == k) & (t == k)) for k in classes], dtype=np.int64)
    fp = np.array([np.sum((p == k) & (t != k)) for k in classes], dtype=np.int64)
    fn = np.array([np.sum((p != k) & (t == k)) for k in classes], dtype=np.int64)
    tn = len(t) - tp - fp - fn
    return ConfusionCounts(classes, tp, fp, fn, tn)


def _ratio(a, b):
    return float(a) / float(b) if b else 0.0


def f1_from_pr(precision, recall):
    return _ratio(2.0 * precision * recall, precision + recall)


def csi_from_f1(f1):
    return f1 / (2.0 - f1)


def metrics(counts):
    """Accuracy, precision, recall, F1 and CSI per class; 0/0 is taken as 0."""
    out = {}
    for i, k in enumerate(counts.classes):
        tp, fp, fn, tn = (int(v[i]) for v in (counts.tp, counts.fp, counts.fn, counts.tn))
        pr = _ratio(tp, tp + fp)
        rec = _ratio(tp, tp + fn)
        out[int(k)] = {
            "accuracy": _ratio(tp + tn, tp + fp + fn + tn),
            "precision": pr,
            "recall": rec,
            "f1": f1_from_pr(pr, rec),
            "csi": _ratio(tp, tp + fp + fn),
        }
    return out
