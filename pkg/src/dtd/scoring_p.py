"""Energy-based scoring of predicted noise.

``f_phi`` is a tanh MLP returning the negative energy; the anomaly score is
``E_phi = -f_phi``.  Negative samples for contrastive training are refined by
Langevin steps ``e <- e + (delta**2 / 2) grad f_phi(e) + delta * eta``.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx


class EnergyModel:
    def __init__(self, dim: int, hidden: int = 64, seed: int = 0, params: dict | None = None):
        self.dim = int(dim)
        self.hidden = int(hidden)
        if params is None:
            gen = nx.Rng(seed).child("ebm").generator()
            h = self.hidden
            params = {
                "ebm.w0": gen.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, h)),
                "ebm.b0": np.zeros(h),
                "ebm.w1": gen.normal(0.0, 1.0 / np.sqrt(h), size=(h, h)),
                "ebm.b1": np.zeros(h),
                "ebm.w2": gen.normal(0.0, 1.0 / np.sqrt(h), size=(h, 1)),
                "ebm.b2": np.zeros(1),
            }
            params = {n: nx.parameter(v, name=n) for n, v in params.items()}
        self.params = params

    def parameters(self) -> dict:
        return self.params

    def f(self, x, params: dict | None = None) -> nx.Tensor:
        """Negative energy, one value per row."""
        p = self.params if params is None else params
        x = nx.as_tensor(x)
        if x.shape[-1] != self.dim:
            raise nx.ShapeError(f"energy model expects dim {self.dim}, got {x.shape}")
        h = nx.tanh(nx.linear(x, p["ebm.w0"], p["ebm.b0"]))
        h = nx.tanh(nx.linear(h, p["ebm.w1"], p["ebm.b1"]))
        out = nx.linear(h, p["ebm.w2"], p["ebm.b2"])
        return nx.reshape(out, out.shape[:-1])

    def frozen(self) -> dict:
        return {n: nx.Tensor(t.data) for n, t in self.params.items()}

    def to_dict(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "params": nx.params_to_dict(self.params)}

    @classmethod
    def from_dict(cls, blob: dict) -> "EnergyModel":
        return cls(blob["dim"], blob["hidden"], params=nx.params_from_dict(blob["params"]))


def _frozen(model) -> dict | None:
    return model.frozen() if hasattr(model, "frozen") else None


def energy_tensor(model, eps, params: dict | None = None) -> nx.Tensor:
    return nx.scale(model.f(eps, params), -1.0)


def energy(model, eps_hat) -> np.ndarray | float:
    """E_phi(eps_hat) = -f_phi(eps_hat); scalar for a single vector."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    out = energy_tensor(model, np.atleast_2d(eps_hat), _frozen(model)).data
    return float(out[0]) if eps_hat.ndim == 1 else out


def grad_f(model, eps) -> np.ndarray:
    """d f_phi / d eps for every row, without touching parameter gradients."""
    x = nx.Tensor(np.atleast_2d(np.asarray(eps, dtype=np.float64)).copy(), requires_grad=True)
    nx.sum(model.f(x, _frozen(model))).backward()
    return x.grad


def langevin_refine(model, eps_init, steps: int = 20, step_size: float = 0.1, seed=0,
                    noise: bool = True, return_trajectory: bool = False):
    """Run ``steps`` Langevin updates (ascent on f_phi) from ``eps_init``."""
    if step_size <= 0:
        raise ValueError(f"step size must be positive, got {step_size}")
    if steps < 0:
        raise ValueError(f"number of steps must be >= 0, got {steps}")
    eps = np.array(eps_init, dtype=np.float64)
    single = eps.ndim == 1
    eps = np.atleast_2d(eps)
    gen = seed if isinstance(seed, np.random.Generator) else nx.Rng(seed).child("langevin").generator()
    traj = [eps.copy()] if return_trajectory else None
    for m in range(1, steps + 1):
        try:
            eps = eps + 0.5 * step_size ** 2 * grad_f(model, eps)
        except nx.NonFiniteError as exc:
            raise nx.NonFiniteError(f"Langevin gradient became non-finite at step {m}: {exc}") from None
        if noise:
            eps = eps + step_size * gen.standard_normal(eps.shape)
        if not np.all(np.isfinite(eps)):
            raise nx.NonFiniteError(f"Langevin iterate became non-finite at step {m}")
        if return_trajectory:
            traj.append(eps.copy())
    if return_trajectory:
        return np.stack(traj)
    return eps[0] if single else eps


def ebm_loss(e_plus, e_minus, alpha: float = 0.1) -> nx.Tensor:
    """mean(E+) - mean(E-) + alpha * (mean(E+^2) + mean(E-^2))."""
    e_plus, e_minus = nx.as_tensor(e_plus), nx.as_tensor(e_minus)
    if e_plus.data.size == 0 or e_minus.data.size == 0:
        raise ValueError("ebm_loss needs non-empty batches")
    loss = nx.subtract(nx.mean(e_plus), nx.mean(e_minus))
    if alpha:
        reg = nx.add(nx.mean(nx.multiply(e_plus, e_plus)), nx.mean(nx.multiply(e_minus, e_minus)))
        loss = nx.add(loss, nx.scale(reg, alpha))
    return loss
