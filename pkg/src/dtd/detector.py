"""Test-time scoring at diffusion step 1 and peaks-over-threshold labelling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize

from . import numerics as nx
from .data import WindowSet
from .diffusion import forward_diffuse
from .scoring_np import iforest_scores, kde_scores, knn_scores, silverman_bandwidth
from .scoring_p import energy
from .trainer import TrainedModel

SCORE_STEP = 1


class NotTrainedError(RuntimeError):
    pass


def _check_ready(model: TrainedModel) -> None:
    if model is None:
        raise NotTrainedError("no trained model")
    if model.branch == "ebm":
        if model.ebm is None:
            raise NotTrainedError("parametric branch has no energy model")
    elif model.branch == "iforest" and model.forest is None:
        raise NotTrainedError("iforest branch has no fitted forest")
    else:
        try:
            rows = model.reference_rows()
        except RuntimeError as exc:
            raise NotTrainedError(str(exc)) from None
        if rows.shape[0] < 2:
            raise NotTrainedError("reference bank has fewer than two entries")


def branch_scores(model: TrainedModel, eps_hat: np.ndarray) -> np.ndarray:
    """Anomaly score of each predicted-noise row (higher means more anomalous)."""
    eps_hat = np.atleast_2d(eps_hat)
    if model.branch == "ebm":
        return np.atleast_1d(energy(model.ebm, eps_hat))
    if model.branch == "iforest":
        return iforest_scores(model.forest, eps_hat)
    rows = model.reference_rows()
    if model.branch == "kde":
        return kde_scores(eps_hat, rows, silverman_bandwidth(rows))
    return knn_scores(eps_hat, rows, min(model.config.knn_k, rows.shape[0]))


def predicted_noise(model: TrainedModel, x0, x_hist, seed: int = 0, draw: int = 0) -> np.ndarray:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x_hist = np.asarray(x_hist, dtype=np.float64)
    if x_hist.ndim == 2:
        x_hist = x_hist[None]
    gen = nx.Rng(seed).child(f"score-draw{draw}").generator()
    eps = gen.standard_normal(x0.shape)
    x1 = forward_diffuse(x0, SCORE_STEP, eps, model.schedule)
    return model.predictor.predict(x1, SCORE_STEP, x_hist)


def score_windows(model: TrainedModel, windows: WindowSet, seed: int = 0, n_draws: int = 1) -> np.ndarray:
    """Scores for a batch of windows; ``n_draws > 1`` averages independent noise draws."""
    _check_ready(model)
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    total = np.zeros(len(windows))
    for draw in range(n_draws):
        total += branch_scores(model, predicted_noise(model, windows.x0, windows.x_hist, seed, draw))
    return total / n_draws


def score_sample(model: TrainedModel, x, x_hist, seed: int = 0, n_draws: int = 1) -> float:
    _check_ready(model)
    x = np.asarray(x, dtype=np.float64)
    out = np.mean([branch_scores(model, predicted_noise(model, x, x_hist, seed, draw))[0]
                   for draw in range(n_draws)])
    return float(out)


# ---------------------------------------------------------------- score traces

@dataclass
class ScoreTrace:
    index: np.ndarray
    score: np.ndarray
    label: np.ndarray | None = None

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if self.index.shape != self.score.shape:
            raise ValueError("index and score lengths differ")
        if self.index.size > 1 and np.any(np.diff(self.index) <= 0):
            raise ValueError("trace time indices must be strictly increasing")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int64)
            if self.label.shape != self.index.shape:
                raise ValueError("label length differs from trace length")

    def __len__(self) -> int:
        return self.index.size


def write_trace(path, trace: ScoreTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "score"] + (["label"] if trace.label is not None else []))
        for i in range(len(trace)):
            row = [int(trace.index[i]), repr(float(trace.score[i]))]
            if trace.label is not None:
                row.append(int(trace.label[i]))
            w.writerow(row)


def read_trace(path) -> ScoreTrace:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"index", "score"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: trace needs 'index' and 'score' columns")
        has_label = "label" in reader.fieldnames
        idx, score, lab = [], [], []
        for r, row in enumerate(reader, start=1):
            try:
                idx.append(int(row["index"]))
                score.append(float(row["score"]))
                if has_label:
                    lab.append(int(row["label"]))
            except (TypeError, ValueError):
                raise ValueError(f"{path}: malformed trace row {r}") from None
    return ScoreTrace(idx, score, lab if has_label else None)


# ---------------------------------------------------------------- POT

@dataclass(frozen=True)
class GpdFit:
    t: float
    gamma: float
    sigma: float
    n_t: int
    M: int
    q: float
    z_q: float
    method: str = "mle"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "GpdFit":
        return cls(**blob)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "GpdFit":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def pot_level(t: float, sigma: float, gamma: float, q: float, M: int, n_t: int) -> float:
    """z_q = t + (sigma/gamma)((qM/N_t)^-gamma - 1); exponential limit near gamma = 0."""
    r = q * M / n_t
    if abs(gamma) < 1e-6:
        return t + sigma * math.log(1.0 / r)
    return t + (sigma / gamma) * (r ** (-gamma) - 1.0)


def _sigma_given_gamma(y: np.ndarray, gamma: float) -> float | None:
    """Root in sigma of the sigma-score equation (1+gamma) mean(y/(sigma+gamma y)) = 1."""
    ymax = float(y.max())
    if abs(gamma) < 1e-9:
        return float(y.mean())
    lo = max(1e-12 * ymax, -gamma * ymax * (1 + 1e-12)) if gamma < 0 else 1e-12 * ymax

    def g(s):
        return (1.0 + gamma) * np.mean(y / (s + gamma * y)) - 1.0

    hi = max(ymax, 1.0)
    while g(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            return None
    if g(lo) < 0:
        return None
    return optimize.brentq(g, lo, hi, xtol=1e-14 * hi, maxiter=500)


def _gpd_nll(y: np.ndarray, gamma: float, sigma: float) -> float:
    if sigma <= 0:
        return math.inf
    if abs(gamma) < 1e-9:
        return y.size * math.log(sigma) + float(y.sum()) / sigma
    z = 1.0 + gamma * y / sigma
    if np.any(z <= 0):
        return math.inf
    return y.size * math.log(sigma) + (1.0 + 1.0 / gamma) * float(np.log(z).sum())


def fit_gpd(excesses) -> tuple:
    """(gamma, sigma, method) by profile maximum likelihood with a moments fallback."""
    y = np.asarray(excesses, dtype=np.float64)
    if y.size < 2 or not np.all(y >= 0) or not y.max() > 0:
        raise ValueError("GPD fit needs at least two non-negative, non-degenerate excesses")

    def profile(gamma):
        s = _sigma_given_gamma(y, gamma)
        return math.inf if s is None else _gpd_nll(y, gamma, s)

    grid = np.linspace(-0.9, 2.0, 59)
    vals = np.array([profile(g) for g in grid])
    if np.isfinite(vals).any():
        i = int(np.nanargmin(vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = optimize.minimize_scalar(profile, bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-10})
        gamma = float(res.x) if res.fun <= vals[i] else float(grid[i])
        sigma = _sigma_given_gamma(y, gamma)
        if sigma is not None and sigma > 0 and math.isfinite(sigma):
            return gamma, float(sigma), "mle"
    return (*_moments(y), "moments")


def _moments(y: np.ndarray) -> tuple:
    m, v = float(y.mean()), float(y.var(ddof=1))
    gamma = 0.5 * (1.0 - m * m / v) if v > 0 else 0.0
    sigma = 0.5 * m * (m * m / v + 1.0) if v > 0 else m
    return gamma, sigma


def fit_pot(scores, t_quantile: float = 0.98, q: float = 1e-3, min_excesses: int = 20) -> GpdFit:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not np.all(np.isfinite(s)):
        raise ValueError("calibration scores contain non-finite values")
    if not 0 < t_quantile < 1 or not 0 < q < 1:
        raise ValueError("t_quantile and q must lie in (0, 1)")
    M = s.size
    if M == 0:
        raise ValueError(f"POT needs at least {min_excesses} excesses; got no calibration scores")
    t = float(np.quantile(s, t_quantile))
    y = s[s > t] - t
    if y.size < min_excesses:
        need = int(math.ceil(min_excesses / (1.0 - t_quantile)))
        raise ValueError(f"POT needs at least {min_excesses} excesses above the {t_quantile} "
                         f"quantile, got {y.size}; provide about {need} or more calibration scores")
    gamma, sigma, method = fit_gpd(y)
    z = pot_level(t, sigma, gamma, q, M, y.size)
    return GpdFit(t, gamma, sigma, int(y.size), M, q, max(z, t), method)


def label(trace, fit: GpdFit) -> np.ndarray:
    """1 where the score strictly exceeds z_q."""
    scores = trace.score if isinstance(trace, ScoreTrace) else np.asarray(trace, dtype=np.float64)
    return (scores > fit.z_q).astype(np.int64)
