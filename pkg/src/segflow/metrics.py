"""Segmentation metrics: Jaccard (IoU), max-threshold F-beta, and MAE."""

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

BETA_SQ = 0.3
N_THRESHOLDS = 255


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def jaccard(pred, gt):
    """|pred & gt| / |pred | gt|, and 1.0 when both masks are empty."""
    pred, gt = _same_shape(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def thresholds(n=N_THRESHOLDS):
    """Evenly spaced binarisation levels ``k / n`` for ``k = 1..n``; a pixel is
    positive when its score is ``>=`` the level.
    """
    return np.arange(1, n + 1) / n


def fbeta_from_pr(precision, recall, beta_sq=BETA_SQ):
    precision = np.asarray(precision, float)
    recall = np.asarray(recall, float)
    den = beta_sq * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        f = (1 + beta_sq) * precision * recall / den
    return np.where(den > 0, f, 0.0)


def f_beta(pred_soft, gt, beta_sq=BETA_SQ, n_thresholds=N_THRESHOLDS):
    """Maximum F-beta over ``n_thresholds`` evenly spaced binarisations.

    Precision at a threshold with no positive predictions counts as 0.
    """
    pred, gt = _same_shape(pred_soft, gt)
    gt = gt.astype(bool)
    n_pos = gt.sum()
    if n_pos == 0:
        raise UndefinedMetricError("F-beta is undefined for an empty ground-truth mask")
    scores = pred.astype(float).ravel()
    labels = gt.ravel()
    levels = thresholds(n_thresholds)
    # counts of predictions >= each level via a sorted sweep
    order = np.sort(scores)
    pos_scores = np.sort(scores[labels])
    predicted = scores.size - np.searchsorted(order, levels, side="left")
    tp = pos_scores.size - np.searchsorted(pos_scores, levels, side="left")
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    recall = tp / n_pos
    return float(fbeta_from_pr(precision, recall, beta_sq).max())


def mae(pred_soft, gt):
    """Mean absolute per-pixel error between a soft map and a binary mask."""
    pred, gt = _same_shape(pred_soft, gt)
    return float(np.abs(pred.astype(float) - gt.astype(float)).mean())
