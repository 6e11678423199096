"""Confusion matrices, per-class IoU, grouped mIoU and hIoU."""
from __future__ import annotations

from typing import Iterable

import numpy as np


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(conf: np.ndarray, pred_mask, gt_mask) -> np.ndarray:
    """Return conf + counts; rows are ground truth, columns prediction."""
    pred = np.asarray(pred_mask).astype(np.int64).ravel()
    gt = np.asarray(gt_mask).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and ground truth sizes differ: {pred.shape} vs {gt.shape}")
    k = conf.shape[0]
    if pred.size and (pred.min() < 0 or gt.min() < 0 or pred.max() >= k or gt.max() >= k):
        raise ValueError(f"label out of range for a {k}-class confusion matrix")
    counts = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    return conf + counts


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where TP + FP + FN == 0 (class absent from both)."""
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(0) + conf.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def hiou(miou_b: float, miou_n: float) -> float:
    if miou_b + miou_n == 0:
        return 0.0
    return 2.0 * miou_b * miou_n / (miou_b + miou_n)


def _mean(values: np.ndarray, idx: Iterable[int]) -> float | None:
    idx = list(idx)
    if not idx:
        return None
    v = values[idx]
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else None


def iou_scores(conf: np.ndarray, base_set: Iterable[int], novel_set: Iterable[int], background_in_base: bool = True) -> dict:
    """Per-class IoU and grouped means, in percent.

    Indices are confusion rows. Background (index 0) joins the base group when
    `background_in_base`, otherwise it only counts towards mIoU_all.
    """
    base = [int(c) for c in base_set]
    novel = [int(c) for c in novel_set]
    if background_in_base and 0 not in base:
        base = [0] + base
    if not background_in_base:
        base = [c for c in base if c != 0]
    iou = per_class_iou(conf) * 100.0
    mb = _mean(iou, base)
    mn = _mean(iou, novel)
    all_idx = sorted(set(base) | set(novel) | {0})
    out = {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou_base": mb,
        "miou_novel": mn,
        "miou_all": _mean(iou, all_idx),
        "hiou": hiou(mb, mn) if mb is not None and mn is not None else None,
    }
    return out
