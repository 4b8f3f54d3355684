"""Independent brute-force reference implementations used as test oracles.

Everything here is written as plainly as possible (nested loops, direct
summation) and never calls into the package's own compute paths.
"""

import numpy as np


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    m, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, m, ho, wo), dtype=np.float64)
    for ni in range(n):
        for mi in range(m):
            for oi in range(ho):
                for oj in range(wo):
                    acc = float(b[mi])
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += float(xp[ni, ci, oi * stride + ki, oj * stride + kj]) \
                                    * float(w[mi, ci, ki, kj])
                    out[ni, mi, oi, oj] = acc
    return out


def maxpool2d_loops(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    patch = x[ni, ci, oi * stride:oi * stride + window,
                              oj * stride:oj * stride + window]
                    out[ni, ci, oi, oj] = patch.max()
    return out


def global_avg_pool_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += float(x[ni, ci, i, j])
            out[ni, ci] = acc / (h * w)
    return out


def softmax_ce_direct(logits, labels):
    n = logits.shape[0]
    total = 0.0
    for i in range(n):
        row = logits[i].astype(np.float64)
        p = np.exp(row - row.max())
        p = p / p.sum()
        total += -np.log(p[labels[i]])
    return total / n


def bilinear_weights(n_in, n_out):
    """Per-output (index0, index1, weight0, weight1) for one axis."""
    rows = []
    for o in range(n_out):
        src = (o + 0.5) * (n_in / n_out) - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        rows.append((i0, i1, 1.0 - w1, w1))
    return rows


def bilinear_resize_loops(x, out_h, out_w):
    n, c, h, w = x.shape
    ry = bilinear_weights(h, out_h)
    rx = bilinear_weights(w, out_w)
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for oi in range(out_h):
                i0, i1, wy0, wy1 = ry[oi]
                for oj in range(out_w):
                    j0, j1, wx0, wx1 = rx[oj]
                    out[ni, ci, oi, oj] = (
                        wy0 * wx0 * float(x[ni, ci, i0, j0])
                        + wy0 * wx1 * float(x[ni, ci, i0, j1])
                        + wy1 * wx0 * float(x[ni, ci, i1, j0])
                        + wy1 * wx1 * float(x[ni, ci, i1, j1]))
    return out


def cka_direct(x, y):
    """Frobenius inner products by explicit double loops over sample pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = 0.0
    nx = 0.0
    ny = 0.0
    for i in range(n):
        for j in range(n):
            kx = float(np.dot(xc[i], xc[j]))
            ky = float(np.dot(yc[i], yc[j]))
            num += kx * ky
            nx += kx * kx
            ny += ky * ky
    return num / (np.sqrt(nx) * np.sqrt(ny))


def si_pairwise(features):
    """Brute-force sum over pairs of mean squared differences."""
    total = 0.0
    s = len(features)
    for i in range(s):
        for j in range(i + 1, s):
            d = features[i].astype(np.float64) - features[j].astype(np.float64)
            total += float((d * d).mean())
    return total
