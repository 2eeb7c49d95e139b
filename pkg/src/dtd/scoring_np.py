"""Nonparametric scoring of predicted noise against a bank of normal noises.

Scores (higher means more anomalous):

* KDE  -- ``-log(mean_i K_h(e, b_i) + 1e-8)`` with an isotropic Gaussian kernel
  and Silverman bandwidth ``1.06 * sigma * M**(-1/5)``;
* kNN  -- mean Euclidean distance to the ``k`` nearest bank entries;
* iForest -- ``2 ** (-E[path] / c(psi))``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import numerics as nx

KDE_FLOOR = 1e-8


class MemoryBank:
    """Bounded FIFO of d-dimensional noise vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._entries: deque = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def update(self, eps_plus) -> "MemoryBank":
        rows = np.atleast_2d(np.asarray(eps_plus, dtype=np.float64))
        if rows.shape[-1] != self.dim or rows.ndim != 2:
            raise ValueError(f"bank holds {self.dim}-dim vectors, got shape {np.shape(eps_plus)}")
        for row in rows:
            self._entries.append(row.copy())
        return self

    def clear(self) -> None:
        self._entries.clear()

    def array(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, self.dim))
        return np.stack(self._entries)

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "entries": self.array().tolist()}

    @classmethod
    def from_dict(cls, blob: dict) -> "MemoryBank":
        bank = cls(blob["capacity"], blob["dim"])
        if blob["entries"]:
            bank.update(np.asarray(blob["entries"], dtype=np.float64))
        return bank


def bank_update(bank: MemoryBank, eps_plus) -> MemoryBank:
    return bank.update(eps_plus)


def _as_rows(bank) -> np.ndarray:
    arr = bank.array() if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    return np.atleast_2d(arr)


def silverman_bandwidth(bank) -> float:
    """1.06 * sigma * M**(-1/5), sigma = mean of per-dimension sample std."""
    rows = _as_rows(bank)
    M = rows.shape[0]
    if M < 2:
        raise ValueError(f"bandwidth needs at least 2 bank entries, got {M}")
    sigma = float(np.mean(rows.std(axis=0, ddof=1)))
    if not sigma > 0:
        raise ValueError("degenerate bank: zero spread in every dimension")
    return 1.06 * sigma * M ** (-0.2)


def kde_scores(eps_hat, bank, h: float) -> np.ndarray:
    rows = _as_rows(bank)
    if rows.shape[0] < 1 or not h > 0:
        raise ValueError("KDE needs a non-empty bank and h > 0")
    return kernels.kde_scores(np.atleast_2d(eps_hat), rows, float(h))


def kde_score(eps_hat, bank, h: float) -> float:
    return float(kde_scores(np.reshape(eps_hat, (1, -1)), bank, h)[0])


def knn_scores(eps_hat, bank, k: int) -> np.ndarray:
    rows = _as_rows(bank)
    if not 1 <= k <= rows.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {rows.shape[0]}]")
    return kernels.knn_scores(np.atleast_2d(eps_hat), rows, int(k))


def knn_score(eps_hat, bank, k: int) -> float:
    return float(knn_scores(np.reshape(eps_hat, (1, -1)), bank, k)[0])


# ---------------------------------------------------------------- isolation forest

def c_factor(n: float) -> float:
    """Normaliser c(n) = 2 ln(n-1) + 0.5772 - 2(n-1)/n."""
    return 2.0 * math.log(n - 1.0) + 0.5772 - 2.0 * (n - 1.0) / n


@dataclass
class IsolationForestModel:
    n_trees: int
    psi: int
    seed: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    roots: np.ndarray

    def path_lengths(self, X) -> np.ndarray:
        return kernels.iforest_path_lengths(np.atleast_2d(X), self.feature, self.threshold,
                                            self.left, self.right, self.size, self.roots)

    def tree_nodes(self, t: int) -> np.ndarray:
        end = self.roots[t + 1] if t + 1 < len(self.roots) else len(self.left)
        return np.arange(self.roots[t], end)

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "psi": self.psi, "seed": self.seed,
                **{f: getattr(self, f).tolist() for f in
                   ("feature", "threshold", "left", "right", "size", "depth", "roots")}}

    @classmethod
    def from_dict(cls, blob: dict) -> "IsolationForestModel":
        ints = ("feature", "left", "right", "size", "depth", "roots")
        arrays = {f: np.asarray(blob[f], dtype=np.int64 if f in ints else np.float64)
                  for f in ints + ("threshold",)}
        return cls(int(blob["n_trees"]), int(blob["psi"]), int(blob["seed"]), **arrays)


def iforest_fit(bank, n_trees: int = 100, psi: int = 256, seed: int = 0) -> IsolationForestModel:
    rows = _as_rows(bank)
    M = rows.shape[0]
    if psi < 2:
        raise ValueError(f"subsample size psi must be >= 2, got {psi}")
    if psi > M:
        raise ValueError(f"subsample size psi={psi} exceeds bank size {M}")
    gen = nx.Rng(seed).child("iforest").generator()
    limit = int(math.ceil(math.log2(psi)))
    feature, threshold, left, right, size, depth, roots = [], [], [], [], [], [], []

    def grow(points: np.ndarray, level: int) -> int:
        idx = len(left)
        feature.append(0)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(points.shape[0])
        depth.append(level)
        if points.shape[0] <= 1 or level >= limit:
            return idx
        lo, hi = points.min(axis=0), points.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            return idx
        q = int(candidates[gen.integers(candidates.size)])
        p = float(gen.uniform(lo[q], hi[q]))
        mask = points[:, q] < p
        feature[idx], threshold[idx] = q, p
        left[idx] = grow(points[mask], level + 1)
        right[idx] = grow(points[~mask], level + 1)
        return idx

    for _ in range(n_trees):
        sample = rows[gen.choice(M, size=psi, replace=False)]
        roots.append(grow(sample, 0))

    return IsolationForestModel(
        n_trees=n_trees, psi=psi, seed=seed,
        feature=np.asarray(feature, dtype=np.int64), threshold=np.asarray(threshold),
        left=np.asarray(left, dtype=np.int64), right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64), depth=np.asarray(depth, dtype=np.int64),
        roots=np.asarray(roots, dtype=np.int64))


def iforest_scores(model: IsolationForestModel, eps_hat) -> np.ndarray:
    return 2.0 ** (-model.path_lengths(eps_hat) / c_factor(model.psi))


def iforest_score(model: IsolationForestModel, eps_hat) -> float:
    return float(iforest_scores(model, np.reshape(eps_hat, (1, -1)))[0])


# ---------------------------------------------------------------- training loss

def kde_score_tensor(eps, bank_rows: np.ndarray, h: float) -> nx.Tensor:
    """Differentiable KDE score per row of ``eps`` (bank treated as constant)."""
    eps = nx.as_tensor(eps)
    d = bank_rows.shape[1]
    diff = nx.subtract(nx.reshape(eps, (eps.shape[0], 1, d)), bank_rows[None])
    a = nx.scale(nx.squared_l2(diff, axis=-1), -1.0 / (2.0 * h * h))
    # shift by the row max for range; exp(shift) is folded back through a constant
    shift = a.data.max(axis=1, keepdims=True)
    dens = nx.mean(nx.exp(nx.subtract(a, shift)), axis=1)
    log_norm = -0.5 * d * math.log(2.0 * math.pi * h * h)
    # rows that underflow to zero density sit on the floor with zero gradient
    scale_const = np.exp(np.minimum(shift[:, 0] + log_norm, 700.0))
    return nx.scale(nx.log(nx.add(nx.multiply(dens, scale_const), KDE_FLOOR)), -1.0)


def knn_score_tensor(eps, bank_rows: np.ndarray, k: int) -> nx.Tensor:
    eps = nx.as_tensor(eps)
    B, d = eps.shape
    d2 = kernels.sq_dists(eps.data, bank_rows)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    neighbours = bank_rows[idx]  # (B, k, d), constant
    diff = nx.subtract(nx.reshape(eps, (B, 1, d)), neighbours)
    return nx.mean(nx.sqrt(nx.squared_l2(diff, axis=-1)), axis=1)


def np_training_loss(eps_plus, eps_minus, bank, method: str = "kde", margin: float = 1.0,
                     k: int = 5) -> nx.Tensor:
    """Hinge max(0, margin + s(e+) - s(e-)), averaged over the batch.

    ``s`` is the differentiable KDE or kNN score against a frozen snapshot of
    the bank; ``iforest`` trains through the kNN surrogate.  A bank too small
    to score against contributes zero.
    """
    rows = _as_rows(bank) if (not isinstance(bank, MemoryBank) or len(bank)) else np.zeros((0, 1))
    eps_plus, eps_minus = nx.as_tensor(eps_plus), nx.as_tensor(eps_minus)
    if method == "kde":
        try:
            h = silverman_bandwidth(rows)
        except ValueError:
            return nx.Tensor(0.0)
        s_pos = kde_score_tensor(eps_plus, rows, h)
        s_neg = kde_score_tensor(eps_minus, rows, h)
    elif method in ("knn", "iforest"):
        if rows.shape[0] < 1:
            return nx.Tensor(0.0)
        kk = min(k, rows.shape[0])
        s_pos = knn_score_tensor(eps_plus, rows, kk)
        s_neg = knn_score_tensor(eps_minus, rows, kk)
    else:
        raise ValueError(f"unknown nonparametric method {method!r}")
    return nx.mean(nx.relu(nx.add(nx.subtract(s_pos, s_neg), margin)))
