"""Independent reference implementations used by several test modules."""

import itertools

import numpy as np


def conv_bruteforce(x, w, theta=0.0, dmap=None):
    """Per-pixel CDC / dilated convolution with zero padding.

    ``x`` is (C, H, W), ``w`` is (O, C, k, k); ``dmap`` gives the dilation per
    output pixel (default 1 everywhere).
    """
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    half = k // 2
    out = np.zeros((o, h, wd))
    for i in range(h):
        for j in range(wd):
            d = 1 if dmap is None else int(dmap[i, j])
            for a in range(k):
                for b in range(k):
                    ii, jj = i + d * (a - half), j + d * (b - half)
                    if 0 <= ii < h and 0 <= jj < wd:
                        out[:, i, j] += w[:, :, a, b] @ x[:, ii, jj]
            out[:, i, j] -= theta * (w.sum(axis=(2, 3)) @ x[:, i, j])
    return out


def auc_pairwise(scores, labels):
    s, y = np.asarray(scores, float), np.asarray(labels).astype(bool)
    total = 0.0
    for a in s[y]:
        for b in s[~y]:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (y.sum() * (~y).sum())


def eer_sweep(scores, labels):
    """Loop over sorted distinct thresholds (plus one above the max), count
    errors sample by sample, and interpolate at the first FAR >= FRR point."""
    s, y = np.asarray(scores, float), np.asarray(labels).astype(bool)
    ts = sorted(set(s.tolist()))
    ts.append(np.nextafter(max(ts), np.inf))
    far, frr = [], []
    for t in ts:
        far.append(sum(1 for v, f in zip(s, y) if f and v < t) / y.sum())
        frr.append(sum(1 for v, f in zip(s, y) if not f and v >= t) / (~y).sum())
    for k in range(len(ts)):
        if far[k] - frr[k] >= 0:
            if far[k] == frr[k]:
                return far[k]
            d0, d1 = far[k - 1] - frr[k - 1], far[k] - frr[k]
            a = -d0 / (d1 - d0)
            return far[k - 1] + a * (far[k] - far[k - 1])
    raise AssertionError("no crossing")


def triplet_bruteforce(x, classes, margin):
    x = np.asarray(x, float)
    n = len(x)
    total, count = 0.0, 0
    for a, p, q in itertools.product(range(n), repeat=3):
        if a != p and classes[a] == classes[p] and classes[q] != classes[a]:
            dap = ((x[a] - x[p]) ** 2).sum()
            daq = ((x[a] - x[q]) ** 2).sum()
            total += max(0.0, margin + dap - daq)
            count += 1
    return total / count
