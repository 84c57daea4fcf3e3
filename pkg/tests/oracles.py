"""Independent scalar reference implementations used by the tests.

Everything here is written with plain loops over Python floats and must not
import the code paths it checks.
"""
import math

import numpy as np


def iou(a, b):
    (s1, e1), (s2, e2) = a, b
    union = max(e1, e2) - min(s1, s2)
    if union <= 0:
        return 1.0 if (s1, e1) == (s2, e2) else 0.0
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / union


def label_map(T, D, gt, o_min, o_max):
    dm = D / T
    y = np.zeros((T, T))
    for i in range(T):
        for j in range(i, T):
            o = iou((i * dm, (j + 1) * dm), gt)
            if o <= o_min:
                v = 0.0
            elif o >= o_max:
                v = 1.0
            else:
                v = (o - o_min) / (o_max - o_min)
            y[i, j] = v
    return y


def boundary(T, D, gt):
    dm = D / T
    out = []
    for t in gt:
        lo, hi = max(0.0, t - 1.5 * dm), min(D, t + 1.5 * dm)
        lab = []
        for i in range(T):
            a, b = i * dm, (i + 1) * dm
            lab.append(min(1.0, max(0.0, min(b, hi) - max(a, lo)) / dm))
        out.append(np.array(lab))
    return out


def tag(T, D, gt):
    dm = D / T
    w = np.array([1.0 if gt[0] <= (i + 0.5) * dm <= gt[1] else 0.0 for i in range(T)])
    if w.sum() == 0:
        best, best_ov = 0, -1.0
        for i in range(T):
            ov = max(0.0, min((i + 1) * dm, gt[1]) - max(i * dm, gt[0]))
            if ov > best_ov:
                best, best_ov = i, ov
        w[best] = 1.0
    return w


def interp_rows(rows, pos):
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(rows) - 1)
    frac = pos - lo
    return [(1 - frac) * rows[lo][c] + frac * rows[hi][c] for c in range(len(rows[0]))]


def dpgm_map(v_f, N):
    """Interpolate sample positions directly, then elementwise max over samples."""
    T, d = len(v_f), len(v_f[0])
    out = np.zeros((d, T, T))
    for i in range(T):
        for j in range(i, T):
            if N == 1:
                positions = [(i + j) / 2]
            else:
                positions = [i + k * (j - i) / (N - 1) for k in range(N)]
            feats = [interp_rows(v_f, p) for p in positions]
            for c in range(d):
                out[c, i, j] = max(f[c] for f in feats)
    return out


def greedy_nms(cells, T, D, k, thr):
    """``cells`` is a list of (score, i, j); exhaustive greedy selection."""
    dm = D / T
    remaining = sorted(cells, key=lambda c: (-c[0], c[1], c[2]))
    kept = []
    for sc, i, j in remaining:
        iv = (i * dm, (j + 1) * dm)
        if all(iou(iv, kv) < thr for _, kv in kept):
            kept.append(((i, j), iv))
        if len(kept) == k:
            break
    return [c for c, _ in kept]


def finite_difference(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at every entry of numpy array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g
