"""Instance-level F1 at an IoU threshold, with a brute-force verification oracle.

A predicted instance matches a ground-truth instance when their IoU exceeds
the threshold strictly (a tie at exactly 0.5 is not a match). For thresholds
at or above 0.5 a matched pair is unique in both directions: two instances
overlapping one partner each at IoU > 0.5 would need that partner to give
away more than its whole area. That uniqueness makes the pairwise scan below
equal to optimal matching; `oracle_f1` checks the claim exhaustively without
relying on it.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import DataError, EmptyDatasetError, UnknownLabelError


@dataclasses.dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    f1: float
    matched_pairs: tuple  # of (pred_label, gt_label, iou)


def _f1_from_counts(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # both masks empty: perfect agreement by convention
    return 2.0 * tp / denom


def _overlap_matrix(pred, gt):
    """Pixel overlap counts, shape (n_pred + 1, n_gt + 1); row/col 0 is background."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask dims differ: {pred.shape} vs {gt.shape}")
    np_, ng = int(pred.max()), int(gt.max())
    joint = pred.astype(np.int64) * (ng + 1) + gt.astype(np.int64)
    counts = np.bincount(joint.ravel(), minlength=(np_ + 1) * (ng + 1))
    return counts.reshape(np_ + 1, ng + 1)


def _iou_matrix(pred, gt):
    ov = _overlap_matrix(pred, gt)
    areas_p = ov.sum(axis=1)
    areas_g = ov.sum(axis=0)
    inter = ov[1:, 1:].astype(np.float64)
    union = areas_p[1:, None] + areas_g[None, 1:] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou  # shape (n_pred, n_gt)


def pair_iou(mask_a, label_a, mask_b, label_b) -> float:
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    a = mask_a == int(label_a)
    b = mask_b == int(label_b)
    if not a.any():
        raise UnknownLabelError(f"label {label_a} not present in first mask")
    if not b.any():
        raise UnknownLabelError(f"label {label_b} not present in second mask")
    union = (a | b).sum()
    return float((a & b).sum() / union)


def f1_at_iou(pred, gt, threshold=0.5) -> MatchResult:
    """Match instances at IoU > threshold and score F1 from the counts."""
    if threshold < 0.5:
        raise DataError(
            f"threshold must be >= 0.5 (match uniqueness), got {threshold}"
        )
    iou = _iou_matrix(pred, gt)
    n_pred, n_gt = iou.shape
    hits = np.argwhere(iou > threshold)
    # uniqueness holds mathematically at threshold >= 0.5; assert it anyway so
    # a silent matrix bug cannot miscount
    if hits.size:
        assert len(set(hits[:, 0])) == len(hits) and len(set(hits[:, 1])) == len(hits)
    pairs = tuple(
        (int(i) + 1, int(j) + 1, float(iou[i, j])) for i, j in hits
    )
    tp = len(pairs)
    fp = n_pred - tp
    fn = n_gt - tp
    return MatchResult(tp, fp, fn, _f1_from_counts(tp, fp, fn), pairs)


def dataset_f1(pairs, threshold=0.5) -> MatchResult:
    """Pool tp/fp/fn over (pred, gt) pairs and score F1 from pooled counts."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("dataset_f1 needs at least one mask pair")
    tp = fp = fn = 0
    for pred, gt in pairs:
        r = f1_at_iou(pred, gt, threshold)
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    return MatchResult(tp, fp, fn, _f1_from_counts(tp, fp, fn), ())


def oracle_f1(pred, gt, threshold=0.5) -> MatchResult:
    """Maximum-cardinality matching by exhaustive search; test use only."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if max(pred.shape) > 64 or max(gt.shape) > 64:
        raise DataError("oracle accepts masks up to 64x64")
    if pred.max() > 10 or gt.max() > 10:
        raise DataError("oracle accepts up to 10 instances per mask")
    iou = _iou_matrix(pred, gt)
    n_pred, n_gt = iou.shape
    cands = [np.nonzero(iou[i] > threshold)[0].tolist() for i in range(n_pred)]

    def best(i, used):
        if i == n_pred:
            return 0
        top = best(i + 1, used)
        for j in cands[i]:
            if not used & (1 << j):
                top = max(top, 1 + best(i + 1, used | (1 << j)))
        return top

    tp = best(0, 0)
    fp = n_pred - tp
    fn = n_gt - tp
    return MatchResult(tp, fp, fn, _f1_from_counts(tp, fp, fn), ())
