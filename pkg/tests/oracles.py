"""Independent straight-loop reference implementations used as test oracles."""

import math

EPS = 1e-12


def kld_loop(pred, gt, eps=EPS):
    total = 0.0
    for i in range(len(gt)):
        for j in range(len(gt[0])):
            g = float(gt[i][j])
            total += g * math.log((g + eps) / (float(pred[i][j]) + eps))
    return total


def sim_loop(pred, gt):
    total = 0.0
    for i in range(len(gt)):
        for j in range(len(gt[0])):
            total += min(float(pred[i][j]), float(gt[i][j]))
    return total


def nss_loop(pred, gt, threshold=0.1):
    flat_p = [float(v) for row in pred for v in row]
    flat_g = [float(v) for row in gt for v in row]
    lo, hi = min(flat_g), max(flat_g)
    if hi <= lo:
        return math.nan
    fix = [(g - lo) / (hi - lo) > threshold for g in flat_g]
    if not any(fix):
        return math.nan
    n = len(flat_p)
    mean = sum(flat_p) / n
    std = math.sqrt(sum((p - mean) ** 2 for p in flat_p) / n)
    if std == 0 or max(flat_p) == min(flat_p):
        return 0.0
    zs = [(p - mean) / std for p, f in zip(flat_p, fix) if f]
    return sum(zs) / len(zs)
