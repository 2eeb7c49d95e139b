"""Cooperative training of the noise predictor with a scoring branch.

Each iteration draws a batch of window pairs, noises them at uniform random
steps and combines the denoising loss with the branch loss:
``L_total = L_DM + lam * L_branch``.  Nonparametric branches (kde, knn,
iforest) use a hinge on bank-relative scores and push positives into a FIFO
bank; the parametric branch trains an energy model contrastively against
Langevin-refined negatives.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .data import WindowSet
from .diffusion import NoiseSchedule, build_schedule, diffusion_loss, forward_diffuse
from .predictor import NoisePredictor, PredictorConfig
from .scoring_np import IsolationForestModel, MemoryBank, iforest_fit, np_training_loss
from .scoring_p import EnergyModel, ebm_loss, energy_tensor, langevin_refine

BRANCHES = ("kde", "knn", "iforest", "ebm")
LOG_COLUMNS = ("iteration", "epoch", "L_DM", "L_branch", "L_total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    branch: str = "kde"
    lam: float = 0.5
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # predictor
    variant: str = "mlp"
    hidden: int = 64
    emb_dim: int = 16
    cheb_order: int = 2
    heads: int = 2
    layers: int = 2
    # nonparametric branch
    bank_capacity: int = 2048
    bank_warmup_epochs: int = 1
    knn_k: int = 5
    margin: float = 1.0
    n_trees: int = 100
    psi: int = 256
    # parametric branch
    ebm_hidden: int = 64
    ebm_alpha: float = 0.1
    langevin_steps: int = 20
    langevin_step_size: float = 0.1
    # bookkeeping
    val_fraction: float = 0.1
    patience: int = 0
    max_iterations: int = 0
    time_budget: float = 0.0
    reference_bank: str = "k1"
    branch_step: int = 1

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.branch_step not in (0, 1):
            raise ValueError("branch_step must be 0 or 1")
        if self.reference_bank not in ("k1", "training"):
            raise ValueError("reference_bank must be 'k1' or 'training'")

    @property
    def nonparametric(self) -> bool:
        return self.branch != "ebm"

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)

    def predictor_config(self, N: int, d: int, H: int) -> PredictorConfig:
        return PredictorConfig(variant=self.variant, d=d, N=N, H=H, T=self.T, hidden=self.hidden,
                               e=self.emb_dim, cheb_order=self.cheb_order, heads=self.heads,
                               layers=self.layers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ValueError(f"unknown training config key(s): {', '.join(sorted(unknown))}")
        return cls(**blob)


@dataclass
class TrainedModel:
    """Everything needed to score: predictor, schedule and branch state."""

    config: TrainConfig
    schedule: NoiseSchedule
    predictor: NoisePredictor
    bank: MemoryBank | None = None
    reference: np.ndarray | None = None
    forest: IsolationForestModel | None = None
    ebm: EnergyModel | None = None
    log: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def branch(self) -> str:
        return self.config.branch

    def reference_rows(self) -> np.ndarray:
        if self.reference is not None:
            return self.reference
        if self.bank is not None and len(self.bank):
            return self.bank.array()
        raise TrainingError("no reference bank: model has not been trained")

    def to_dict(self) -> dict:
        return {
            "version": nx.CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "predictor": self.predictor.to_dict(),
            "bank": None if self.bank is None else self.bank.to_dict(),
            "reference": None if self.reference is None else self.reference.tolist(),
            "forest": None if self.forest is None else self.forest.to_dict(),
            "ebm": None if self.ebm is None else self.ebm.to_dict(),
            "epochs": self.epochs,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "TrainedModel":
        if blob.get("version") != nx.CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
        ref = blob.get("reference")
        return cls(
            config=TrainConfig.from_dict(blob["config"]),
            schedule=NoiseSchedule.from_dict(blob["schedule"]),
            predictor=NoisePredictor.from_dict(blob["predictor"]),
            bank=None if blob.get("bank") is None else MemoryBank.from_dict(blob["bank"]),
            reference=None if ref is None else np.asarray(ref, dtype=np.float64).reshape(len(ref), -1),
            forest=None if blob.get("forest") is None else IsolationForestModel.from_dict(blob["forest"]),
            ebm=None if blob.get("ebm") is None else EnergyModel.from_dict(blob["ebm"]),
            epochs=blob.get("epochs", []),
            meta=blob.get("meta", {}),
        )


def save_checkpoint(path, model: TrainedModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_checkpoint(path) -> TrainedModel:
    with open(path) as fh:
        return TrainedModel.from_dict(json.load(fh))


def write_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row["iteration"], row["epoch"]] + [repr(row[c]) for c in LOG_COLUMNS[2:]])


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{"iteration": int(r["iteration"]), "epoch": int(r["epoch"]),
                 **{c: float(r[c]) for c in LOG_COLUMNS[2:]}} for r in csv.DictReader(fh)]


def _branch_loss(cfg, pred, bank, ebm, eps_pos, eps_neg, gen):
    if cfg.nonparametric:
        # the bank is a frozen snapshot: positives enter it after the loss
        return np_training_loss(eps_pos, eps_neg, bank.array() if len(bank) else np.zeros((0, bank.dim)),
                                method=cfg.branch, margin=cfg.margin, k=cfg.knn_k)
    refined = langevin_refine(ebm, eps_neg.data, cfg.langevin_steps, cfg.langevin_step_size, seed=gen)
    # straight-through: the refinement offset is a constant, gradients reach theta via eps_neg
    neg = nx.add(eps_neg, refined - eps_neg.data)
    return ebm_loss(energy_tensor(ebm, eps_pos), energy_tensor(ebm, neg), cfg.ebm_alpha)


def expected_norm(model: NoisePredictor, schedule: NoiseSchedule, windows: WindowSet,
                  seed: int = 0) -> float:
    """Mean ||eps_theta(x_1, 1, x_hist)||^2 / d over ``windows``."""
    gen = nx.Rng(seed).child("expected-norm").generator()
    eps = gen.standard_normal(windows.x0.shape)
    x1 = forward_diffuse(windows.x0, 1, eps, schedule)
    out = model.predict(x1, 1, windows.x_hist)
    return float(np.mean(np.sum(out ** 2, axis=1)) / out.shape[1])


def validation_loss(model: NoisePredictor, schedule: NoiseSchedule, windows: WindowSet,
                    seed: int = 0) -> float:
    gen = nx.Rng(seed).child("val-loss").generator()
    k = gen.integers(0, schedule.T, size=len(windows))
    eps = gen.standard_normal(windows.x0.shape)
    out = model.predict(forward_diffuse(windows.x0, k, eps, schedule), k, windows.x_hist)
    return float(np.mean(np.sum((eps - out) ** 2, axis=1)))


def reference_noises(model: NoisePredictor, schedule: NoiseSchedule, windows: WindowSet,
                     seed: int = 0, limit: int | None = None) -> np.ndarray:
    """Step-1 predicted noises of normal windows, drawn as at test time."""
    gen = nx.Rng(seed).child("reference").generator()
    if limit is not None and len(windows) > limit:
        windows = windows.subset(np.sort(gen.choice(len(windows), size=limit, replace=False)))
    eps = gen.standard_normal(windows.x0.shape)
    return model.predict(forward_diffuse(windows.x0, 1, eps, schedule), 1, windows.x_hist)


def train(windows: WindowSet, config: TrainConfig, N: int = 1, d: int | None = None,
          log_path=None, on_epoch=None, on_step=None) -> TrainedModel:
    """Train on normal windows; returns predictor, branch state and the loss log.

    ``N`` and ``d`` describe the node layout of the flat samples (default: one
    node holding every channel).  ``on_epoch(epoch, model)`` is called after
    every epoch, e.g. to write an intermediate checkpoint; ``on_step(iteration,
    predictor)`` after every parameter update.
    """
    cfg = config
    if windows is None or len(windows) == 0:
        raise TrainingError("empty training dataset")
    D = windows.x0.shape[1]
    d = D // N if d is None else d
    if N * d != D:
        raise TrainingError(f"node layout {N}x{d} does not match sample dimension {D}")
    rng = nx.Rng(cfg.seed)
    schedule = cfg.schedule()
    predictor = NoisePredictor(cfg.predictor_config(N, d, windows.x_hist.shape[1]), seed=cfg.seed)

    split_gen = rng.child("split").generator()
    n_val = int(round(cfg.val_fraction * len(windows)))
    if n_val and len(windows) - n_val < 1:
        n_val = 0
    perm = split_gen.permutation(len(windows))
    val = windows.subset(np.sort(perm[:n_val])) if n_val else None
    fit = windows.subset(np.sort(perm[n_val:])) if n_val else windows

    bank = MemoryBank(cfg.bank_capacity, D) if cfg.nonparametric else None
    ebm = None if cfg.nonparametric else EnergyModel(D, cfg.ebm_hidden, seed=cfg.seed)
    params = dict(predictor.parameters())
    if ebm is not None:
        params.update(ebm.parameters())
    adam = nx.AdamState()
    shuffle = rng.child("shuffle").generator()
    noise = rng.child("noise").generator()
    langevin = rng.child("langevin").generator()

    log, epoch_log = [], []
    it = 0
    best, stale = math.inf, 0
    start = time.perf_counter()
    stop = False
    for epoch in range(cfg.epochs):
        if bank is not None and epoch == cfg.bank_warmup_epochs:
            bank.clear()
        order = shuffle.permutation(len(fit))
        sums = np.zeros(3)
        n_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            B = idx.size
            x0, hist = fit.x0[idx], fit.x_hist[idx]
            k = noise.integers(0, schedule.T, size=B)
            eps = noise.standard_normal((B, D))
            xk = forward_diffuse(x0, k, eps, schedule)
            step = cfg.branch_step
            x_pos = x0 if step == 0 else forward_diffuse(x0, step, noise.standard_normal((B, D)), schedule)
            # one stacked pass: [x_k at k | positive at step | x_k at step (negative)]
            try:
                out = predictor(np.concatenate([xk, x_pos, xk]),
                                np.concatenate([k, np.full(2 * B, step)]),
                                np.concatenate([hist, hist, hist]))
                eps_hat = nx.slice_(out, slice(0, B))
                eps_pos = nx.slice_(out, slice(B, 2 * B))
                eps_neg = nx.slice_(out, slice(2 * B, 3 * B))
                l_dm = diffusion_loss(eps, eps_hat)
                l_br = _branch_loss(cfg, predictor, bank, ebm, eps_pos, eps_neg, langevin)
                total = nx.add(l_dm, nx.scale(l_br, cfg.lam))
            except nx.NonFiniteError as exc:
                raise TrainingError(f"non-finite values at iteration {it}: {exc}") from None
            row = {"iteration": it, "epoch": epoch, "L_DM": float(l_dm.data),
                   "L_branch": float(l_br.data), "L_total": float(total.data)}
            if not all(math.isfinite(row[c]) for c in LOG_COLUMNS[2:]):
                raise TrainingError(f"non-finite loss at iteration {it}: {row}")
            for p in params.values():
                p.zero_grad()
            try:
                total.backward()
                nx.adam_step(params, {n: p.grad if p.grad is not None else np.zeros_like(p.data)
                                      for n, p in params.items()}, adam, lr=cfg.lr)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"non-finite gradient at iteration {it}: {exc}") from None
            if bank is not None:
                bank.update(eps_pos.data)
            log.append(row)
            if on_step is not None:
                on_step(it, predictor)
            sums += (row["L_DM"], row["L_branch"], row["L_total"])
            n_batches += 1
            it += 1
            if cfg.max_iterations and it >= cfg.max_iterations:
                stop = True
            if cfg.time_budget and time.perf_counter() - start > cfg.time_budget:
                stop = True
            if stop:
                break
        summary = {"epoch": epoch, "iterations": n_batches,
                   **dict(zip(("L_DM", "L_branch", "L_total"), (sums / max(n_batches, 1)).tolist()))}
        if val is not None:
            summary["val_L_DM"] = validation_loss(predictor, schedule, val, seed=cfg.seed)
            summary["val_norm_ratio"] = expected_norm(predictor, schedule, val, seed=cfg.seed)
        epoch_log.append(summary)
        model = TrainedModel(cfg, schedule, predictor, bank=bank, ebm=ebm, log=log, epochs=epoch_log)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if stop:
            break
        if cfg.patience and val is not None:
            if summary["val_L_DM"] < best - 1e-12:
                best, stale = summary["val_L_DM"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    model = TrainedModel(cfg, schedule, predictor, bank=bank, ebm=ebm, log=log, epochs=epoch_log,
                         meta={"iterations": it})
    model.elapsed = time.perf_counter() - start
    finalize_reference(model, fit)
    if log_path is not None:
        write_log(log_path, log)
    return model


def finalize_reference(model: TrainedModel, windows: WindowSet) -> TrainedModel:
    """Build the scoring reference set and, for iforest, the forest."""
    cfg = model.config
    if not cfg.nonparametric:
        return model
    if cfg.reference_bank == "k1":
        model.reference = reference_noises(model.predictor, model.schedule, windows,
                                           seed=cfg.seed, limit=cfg.bank_capacity)
    rows = model.reference_rows()
    if cfg.branch == "iforest":
        model.forest = iforest_fit(rows, cfg.n_trees, min(cfg.psi, rows.shape[0]), seed=cfg.seed)
    return model
