"""Command-line entry point: synth, train, score, label, eval, export-graph, export-surface."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, detector, metrics, trainer
from . import numerics as nx
from .diffusion import forward_diffuse
from .scoring_p import energy

RUN_DEFAULTS = {
    "H": 16,
    "stride": 1,
    "t_quantile": 0.98,
    "q": 1e-3,
    "min_excesses": 20,
    "n_draws": 1,
    "tau": 50,
    "label_column": "label",
}
TRAIN_DEFAULTS = {f.name: getattr(trainer.TrainConfig(), f.name) for f in fields(trainer.TrainConfig)}
TRAIN_DEFAULTS["variant"] = "auto"
DEFAULTS = {**TRAIN_DEFAULTS, **RUN_DEFAULTS}
SPLITS = ("train", "val", "test", "all")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- configuration

def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise CliError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        cfg.update(parse_config_text(item, "--set"))
    for key in ("seed", "branch", "q"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def train_config(cfg: dict, grouped: bool) -> trainer.TrainConfig:
    blob = {k: cfg[k] for k in TRAIN_DEFAULTS}
    if blob["variant"] == "auto":
        blob["variant"] = "spatiotemporal" if grouped else "mlp"
    try:
        return trainer.TrainConfig(**blob)
    except ValueError as exc:
        raise CliError(str(exc)) from None


# ---------------------------------------------------------------- io helpers

@contextmanager
def atomic_path(path):
    """Yield a temporary path that replaces ``path`` only on success."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _load_dataset(path, grouping_path, cfg) -> data.TimeSeriesDataset:
    grouping = data.load_grouping(_require_file(grouping_path, "grouping file")) if grouping_path else None
    return data.load_csv(_require_file(path, "data file"), label_column=cfg["label_column"],
                         grouping=grouping)


def _data_meta(ds: data.TimeSeriesDataset, cfg: dict) -> dict:
    return {"channels": list(ds.channels), "mean": ds.mean.tolist(), "std": ds.std.tolist(),
            "grouping": ds.grouping, "H": cfg["H"], "stride": cfg["stride"]}


def _apply_meta(ds: data.TimeSeriesDataset, meta: dict) -> data.TimeSeriesDataset:
    if list(ds.channels) != meta["channels"]:
        raise CliError(f"data channels {list(ds.channels)} differ from training channels {meta['channels']}")
    ds.mean = np.asarray(meta["mean"])
    ds.std = np.asarray(meta["std"])
    ds.grouping = meta["grouping"]
    return ds


def split_windows(ds: data.TimeSeriesDataset, split: str, H: int, stride: int,
                  normal_only: bool = False) -> data.WindowSet:
    """Windows whose current row lies in ``split``; history may reach into the previous split."""
    X = ds.model_matrix()
    L = len(ds)
    if split == "all":
        lo, hi = 0, L
    else:
        part = data.split_slices(L)[SPLITS.index(split)]
        lo, hi = part.start, part.stop
    start = max(lo - H, 0)
    labels = None if ds.labels is None else ds.labels[start:hi]
    if hi - start <= H:
        raise CliError(f"{split} split too short for history H={H}")
    if normal_only:
        ws = data.normal_windows(X[start:hi], labels, H, stride)
    else:
        ws = data.make_windows(X[start:hi], H, stride, labels)
    ws.index = ws.index + start
    return ws


def _split_seed(seed: int, name: str) -> int:
    return int(nx.Rng(seed).child(name).generator().integers(2 ** 31 - 1))


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg) -> None:
    spec_path = _require_file(args.spec, "synthetic spec")
    try:
        spec = data.load_synthetic_spec(spec_path)
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc)) from None
    if args.seed is not None:
        spec.seed = args.seed
    ds = data.synth_generate(spec)
    with atomic_path(args.out) as tmp:
        data.write_csv(tmp, ds)


def cmd_train(args, cfg) -> None:
    ds = _load_dataset(args.data, args.grouping, cfg)
    tcfg = train_config(cfg, ds.grouping is not None)
    windows = split_windows(ds, "train", cfg["H"], cfg["stride"], normal_only=True)
    if len(windows) == 0:
        raise CliError("no normal training windows")
    _, N, d = ds.node_layout()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def per_epoch(epoch, model):
        if args.checkpoint_every_epoch:
            model.meta["data"] = _data_meta(ds, cfg)
            with atomic_path(out / f"checkpoint_epoch{epoch}.json") as tmp:
                trainer.save_checkpoint(tmp, model)

    model = trainer.train(windows, tcfg, N=N, d=d, on_epoch=per_epoch)
    model.meta["data"] = _data_meta(ds, cfg)
    with atomic_path(out / "train_log.csv") as tmp:
        trainer.write_log(tmp, model.log)
    with atomic_path(out / "checkpoint.json") as tmp:
        trainer.save_checkpoint(tmp, model)


def _load_model(path) -> trainer.TrainedModel:
    try:
        return trainer.load_checkpoint(_require_file(path, "checkpoint"))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_score(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    meta = model.meta["data"]
    ds = _apply_meta(data.load_csv(_require_file(args.data, "data file"), label_column=cfg["label_column"],
                                   normalize=False), meta)
    ws = split_windows(ds, args.split, meta["H"], meta["stride"])
    scores = detector.score_windows(model, ws, seed=_split_seed(cfg["seed"], args.split),
                                    n_draws=cfg["n_draws"])
    with atomic_path(args.out) as tmp:
        detector.write_trace(tmp, detector.ScoreTrace(ws.index, scores, ws.labels))


def cmd_label(args, cfg) -> None:
    trace = detector.read_trace(_require_file(args.trace, "score trace"))
    calib = detector.read_trace(_require_file(args.calibration, "calibration trace"))
    scores = calib.score if calib.label is None else calib.score[calib.label == 0]
    try:
        fit = detector.fit_pot(scores, cfg["t_quantile"], cfg["q"], cfg["min_excesses"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    pred = detector.label(trace, fit)
    out = Path(args.out)
    fit_path = Path(args.fit_out) if args.fit_out else out.with_suffix(".gpd.json")
    with atomic_path(out) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "score", "pred"] + (["label"] if trace.label is not None else []))
            for i in range(len(trace)):
                row = [int(trace.index[i]), repr(float(trace.score[i])), int(pred[i])]
                if trace.label is not None:
                    row.append(int(trace.label[i]))
                w.writerow(row)
    with atomic_path(fit_path) as tmp:
        fit.save(tmp)


def _read_columns(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name in cols:
                cols[name].append(row[name])
    return cols


def cmd_eval(args, cfg) -> None:
    lab = _read_columns(_require_file(args.labeled, "labeled trace"))
    if "pred" not in lab or "index" not in lab:
        raise CliError("labeled trace needs 'index' and 'pred' columns")
    index = np.asarray(lab["index"], dtype=np.int64)
    pred = np.asarray(lab["pred"], dtype=np.int64)
    if args.truth:
        truth = _read_columns(_require_file(args.truth, "truth file"))
        if cfg["label_column"] not in truth:
            raise CliError(f"truth file has no {cfg['label_column']!r} column")
        t = np.asarray([int(float(v)) for v in truth[cfg["label_column"]]], dtype=np.int64)
        if "index" in truth:
            t_index = np.asarray(truth["index"], dtype=np.int64)
            if t_index.size != index.size or np.any(t_index != index):
                raise CliError(f"length mismatch: {index.size} predictions vs {t_index.size} truth rows")
            true = t
        else:
            if index.size and (index.min() < 0 or index.max() >= t.size):
                raise CliError(f"length mismatch: trace indices reach {index.max()} but truth has {t.size} rows")
            true = t[index]
    elif "label" in lab:
        true = np.asarray(lab["label"], dtype=np.int64)
    else:
        raise CliError("no ground truth: pass --truth or a trace with a label column")
    try:
        rep = metrics.report(pred, true, cfg["tau"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    rep["event"]["scheme"] = "onset-tolerance event metrics (not affiliation)"
    with atomic_path(args.out) as tmp:
        metrics.write_report(tmp, rep)


def cmd_export_graph(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    if model.predictor.config.variant != "spatiotemporal":
        raise CliError("export-graph needs a spatiotemporal checkpoint (train with a node grouping)")
    A = model.predictor.adjacency().data
    names = list((model.meta["data"].get("grouping") or {}).keys()) or [f"n{i}" for i in range(A.shape[0])]
    with atomic_path(args.out) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node"] + names)
            for name, row in zip(names, A):
                w.writerow([name] + [repr(float(v)) for v in row])


def parse_steps(text: str, T: int) -> list:
    """``"1,2,5"`` or ``"start:stop:step"`` (stop exclusive)."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            steps = list(range(*parts))
        else:
            steps = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise CliError(f"cannot parse steps {text!r}") from None
    if not steps or min(steps) < 0 or max(steps) >= T:
        raise CliError(f"steps must be non-empty and lie in [0, {T})")
    return steps


def cmd_export_surface(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    meta = model.meta["data"]
    ds = _apply_meta(data.load_csv(_require_file(args.data, "data file"), label_column=cfg["label_column"],
                                   normalize=False), meta)
    ws = split_windows(ds, args.split, meta["H"], meta["stride"])
    steps = parse_steps(args.steps, model.schedule.T)
    if args.samples < 1:
        raise CliError("--samples must be >= 1")
    gen = nx.Rng(cfg["seed"]).child("surface").generator()
    pick = np.sort(gen.choice(len(ws), size=min(args.samples, len(ws)), replace=False))
    sub = ws.subset(pick)
    D = sub.x0.shape[1]
    rows = []
    for k in steps:
        eps = gen.standard_normal(sub.x0.shape)
        out = model.predictor.predict(forward_diffuse(sub.x0, k, eps, model.schedule), k, sub.x_hist)
        score = (np.atleast_1d(energy(model.ebm, out)) if model.ebm is not None
                 else detector.branch_scores(model, out))
        for i in range(len(sub)):
            rows.append([k, int(sub.index[i]), repr(float(np.linalg.norm(out[i])))]
                        + [repr(float(v)) for v in out[i]] + [repr(float(score[i]))])
    with atomic_path(args.out) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "index", "noise_norm"] + [f"eps{j}" for j in range(D)] + ["energy"])
            w.writerows(rows)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--branch", choices=trainer.BRANCHES)
    common.add_argument("--q", type=float, help="POT risk parameter")

    p = argparse.ArgumentParser(prog="dtd", description="Diffusion-based anomaly detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled CSV")
    s.add_argument("spec")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train predictor and branch")
    s.add_argument("--data", required=True)
    s.add_argument("--grouping")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--checkpoint-every-epoch", action="store_true")

    s = sub.add_parser("score", parents=[common], help="score windows of a CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--out", required=True)

    s = sub.add_parser("label", parents=[common], help="POT threshold and binary labels")
    s.add_argument("--trace", required=True)
    s.add_argument("--calibration", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--fit-out")

    s = sub.add_parser("eval", parents=[common], help="point-wise and event metrics")
    s.add_argument("--labeled", required=True)
    s.add_argument("--truth")
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-graph", parents=[common], help="learned adjacency as N x N CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-surface", parents=[common], help="noise output and energy over steps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--steps", default="0:10:1")
    s.add_argument("--samples", type=int, default=50)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "label": cmd_label,
    "eval": cmd_eval,
    "export-graph": cmd_export_graph,
    "export-surface": cmd_export_surface,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (CliError, data.DataFormatError, detector.NotTrainedError, trainer.TrainingError,
            nx.NonFiniteError, nx.ShapeError) as exc:
        print(f"dtd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
