"""Noise schedule, forward noising and the noise-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule.

    Index 0 is the clean sample, so ``alpha_bars[0] == 1`` and
    ``alpha_bars[k] = prod(alphas[1:k+1])`` for ``k >= 1``; ``betas[0]`` is
    stored for completeness but never enters a cumulative product.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, blob: dict) -> "NoiseSchedule":
        return build_schedule(int(blob["T"]), float(blob["beta_start"]), float(blob["beta_end"]))

    def check_step(self, k) -> None:
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k >= self.T):
            raise ValueError(f"diffusion step out of range [0, {self.T}): {k.min()}..{k.max()}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.ones(T)
    alpha_bars[1:] = np.cumprod(alphas[1:])
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def forward_diffuse(x0, k, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps.

    ``k`` may be a scalar or one step per leading (batch) row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    schedule.check_step(k)
    ab = schedule.alpha_bars[np.asarray(k)]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def diffusion_loss(eps, eps_hat) -> nx.Tensor:
    """Mean over the batch (leading axis) of ||eps - eps_hat||^2."""
    eps, eps_hat = nx.as_tensor(eps), nx.as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise nx.ShapeError(f"diffusion_loss: {eps.shape} vs {eps_hat.shape}")
    diff = nx.subtract(eps, eps_hat)
    if diff.ndim <= 1:
        return nx.squared_l2(diff, axis=None)
    per_sample = nx.squared_l2(diff, axis=tuple(range(1, diff.ndim)))
    return nx.mean(per_sample)
