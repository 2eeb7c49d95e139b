"""Pure numpy scoring kernels; reference semantics for the compiled twins.

Distances are accumulated dimension by dimension in index order, so the
compiled loop and this file round identically.
"""
from __future__ import annotations

import math

import numpy as np

EULER_GAMMA = 0.5772156649015329
KDE_FLOOR = 1e-8
_CHUNK = 512


def sq_dists(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    out = np.zeros((X.shape[0], B.shape[0]))
    for j in range(X.shape[1]):
        diff = X[:, j, None] - B[None, :, j]
        out += diff * diff
    return out


def kde_scores(X, B, h: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    m, d = B.shape
    log_norm = -0.5 * d * math.log(2.0 * math.pi * h * h) - math.log(m)
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _CHUNK):
        a = -sq_dists(X[i:i + _CHUNK], B) / (2.0 * h * h)
        top = a.max(axis=1)
        lse = top + np.log(np.exp(a - top[:, None]).sum(axis=1))
        out[i:i + _CHUNK] = -np.logaddexp(lse + log_norm, math.log(KDE_FLOOR))
    return out


def knn_scores(X, B, k: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    out = np.empty(X.shape[0])
    for i in range(0, X.shape[0], _CHUNK):
        d2 = sq_dists(X[i:i + _CHUNK], B)
        idx = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < B.shape[0] else np.argsort(d2, axis=1)
        near = np.sort(np.sqrt(np.take_along_axis(d2, idx, axis=1)), axis=1)
        acc = np.zeros(near.shape[0])
        for j in range(k):
            acc += near[:, j]
        out[i:i + _CHUNK] = acc / k
    return out


def average_path_length(n) -> np.ndarray:
    """Expected unsuccessful-search depth of a random BST with n keys (leaf credit)."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    two = n == 2
    big = n > 2
    out[two] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


def iforest_path_lengths(X, feature, threshold, left, right, size, roots) -> np.ndarray:
    """Mean path length of each row of X over the packed trees."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    rows = np.arange(n)
    credit = average_path_length(size)
    total = np.zeros(n)
    for root in roots:
        node = np.full(n, root, dtype=np.int64)
        depth = np.zeros(n)
        active = left[node] >= 0
        while active.any():
            cur = node[active]
            go_left = X[rows[active], feature[cur]] < threshold[cur]
            node[active] = np.where(go_left, left[cur], right[cur])
            depth[active] += 1.0
            active = left[node] >= 0
        total += depth + credit[node]
    return total / len(roots)
