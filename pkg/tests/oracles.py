"""Independent brute-force reference implementations used by the tests."""

import numpy as np


def brute_force_correlation(fi, fj, r):
    d, h, w = fi.shape
    out = np.zeros(((2 * r + 1) ** 2, h, w))
    for y in range(h):
        for x in range(w):
            k = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[k, y, x] = sum(fi[c, y, x] * fj[c, yy, xx] for c in range(d)) / d
                    k += 1
    return out


def naive_jaccard(pred, gt):
    inter = union = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        inter += bool(p) and bool(g)
        union += bool(p) or bool(g)
    return 1.0 if union == 0 else inter / union


def naive_f_beta(pred, gt, beta_sq=0.3):
    best = 0.0
    flat_p, flat_g = np.ravel(pred), np.ravel(gt)
    n_pos = sum(1 for g in flat_g if g)
    for k in range(1, 256):
        level = k / 255
        tp = fp = 0
        for p, g in zip(flat_p, flat_g):
            if p >= level:
                if g:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / n_pos
        den = beta_sq * precision + recall
        f = (1 + beta_sq) * precision * recall / den if den else 0.0
        best = max(best, f)
    return best


def naive_mae(pred, gt):
    flat_p, flat_g = np.ravel(pred), np.ravel(gt)
    return sum(abs(float(p) - float(g)) for p, g in zip(flat_p, flat_g)) / len(flat_p)


def random_metric_pair(rng):
    """A soft map, a hard prediction and a non-empty ground truth of a random small size."""
    h, w = rng.integers(3, 12, size=2)
    gt = rng.random((h, w)) < rng.uniform(0.1, 0.9)
    gt[rng.integers(h), rng.integers(w)] = True
    soft = np.clip(gt * rng.uniform(0.2, 0.8) + rng.uniform(0, 0.6, (h, w)), 0, 1)
    if rng.random() < 0.3:
        soft = np.round(soft * 255) / 255  # scores exactly on threshold levels
    pred = rng.random((h, w)) < 0.5
    return soft, pred, gt
