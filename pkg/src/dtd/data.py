"""Datasets, sliding windows, node grouping and a synthetic fault generator."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

SPLIT = (0.70, 0.15, 0.15)
FAULT_TYPES = ("mean-shift", "variance-burst", "correlation-break")


class DataFormatError(ValueError):
    pass


@dataclass
class TimeSeriesDataset:
    values: np.ndarray
    channels: list
    labels: np.ndarray | None = None
    grouping: dict | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channels):
            raise DataFormatError(f"values shape {self.values.shape} does not match "
                                  f"{len(self.channels)} channels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self),):
                raise DataFormatError("labels length differs from series length")
        if self.grouping is not None:
            check_grouping(self.grouping, self.channels)

    def __len__(self) -> int:
        return self.values.shape[0]

    def fit_normalization(self, rows: slice | np.ndarray | None = None) -> "TimeSeriesDataset":
        """Per-channel z-score statistics from ``rows`` (default: training portion, normal rows)."""
        if rows is None:
            rows = split_slices(len(self))[0]
        block = self.values[rows]
        if self.labels is not None:
            block = block[self.labels[rows] == 0]
        if block.shape[0] < 2:
            raise DataFormatError("need at least two normal training rows for normalisation")
        self.mean = block.mean(axis=0)
        std = block.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        return self

    def normalized(self) -> np.ndarray:
        if self.mean is None:
            raise RuntimeError("normalisation statistics not fitted")
        return (self.values - self.mean) / self.std

    def node_layout(self) -> tuple:
        """(column order, N, d): node-major channel ordering for the predictor."""
        if self.grouping is None:
            return np.arange(len(self.channels)), 1, len(self.channels)
        pos = {c: i for i, c in enumerate(self.channels)}
        order = [pos[c] for chans in self.grouping.values() for c in chans]
        sizes = {len(chans) for chans in self.grouping.values()}
        return np.asarray(order), len(self.grouping), sizes.pop()

    def model_matrix(self) -> np.ndarray:
        """Normalised values with columns in node-major order."""
        order, _, _ = self.node_layout()
        return self.normalized()[:, order]


def check_grouping(grouping: dict, channels) -> None:
    seen = [c for chans in grouping.values() for c in chans]
    if len(seen) != len(set(seen)):
        raise DataFormatError("node grouping assigns a channel to more than one node")
    if set(seen) != set(channels):
        missing = sorted(set(channels) - set(seen))
        unknown = sorted(set(seen) - set(channels))
        raise DataFormatError(f"node grouping must partition the channels exactly "
                              f"(missing {missing}, unknown {unknown})")
    if len({len(chans) for chans in grouping.values()}) != 1:
        raise DataFormatError("every node must hold the same number of channels")


def load_grouping(path) -> dict:
    with open(path) as fh:
        blob = json.load(fh)
    if not isinstance(blob, dict) or not all(isinstance(v, list) for v in blob.values()):
        raise DataFormatError('grouping JSON must look like {"node": ["channel", ...]}')
    return {str(k): [str(c) for c in v] for k, v in blob.items()}


def split_slices(n: int, fractions=SPLIT) -> tuple:
    """Time-ordered train/validation/test row slices."""
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return slice(0, a), slice(a, b), slice(b, n)


def load_csv(path, label_column: str = "label", grouping: dict | None = None,
             normalize: bool = True) -> TimeSeriesDataset:
    """Read a header + numeric CSV with an optional trailing 0/1 label column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        has_labels = bool(header) and header[-1] == label_column
        channels = header[:-1] if has_labels else header
        if not channels:
            raise DataFormatError(f"{path}: no data columns")
        rows, labels = [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(c) for c in row[:len(channels)]])
            except ValueError:
                bad = next(c for c in row[:len(channels)] if not _is_float(c))
                raise DataFormatError(f"{path}: row {r} has non-numeric cell {bad!r}") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise DataFormatError(f"{path}: row {r} has a non-finite value")
            if has_labels:
                cell = row[-1].strip()
                if cell not in ("0", "1", "0.0", "1.0"):
                    raise DataFormatError(f"{path}: row {r} has label {cell!r}, expected 0 or 1")
                labels.append(int(float(cell)))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    ds = TimeSeriesDataset(np.asarray(rows), channels,
                           labels=np.asarray(labels) if has_labels else None, grouping=grouping)
    return ds.fit_normalization() if normalize else ds


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_csv(path, dataset: TimeSeriesDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(dataset.channels) + (["label"] if dataset.labels is not None else []))
        for i, row in enumerate(dataset.values):
            cells = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)


# ---------------------------------------------------------------- windows

@dataclass
class WindowPair:
    x0: np.ndarray
    x_hist: np.ndarray
    index: int
    label: int | None = None


@dataclass
class WindowSet:
    """Batched window pairs: x0 (n, D), x_hist (n, H, D), index (n,)."""

    x0: np.ndarray
    x_hist: np.ndarray
    index: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x0.shape[0]

    def __getitem__(self, i: int) -> WindowPair:
        return WindowPair(self.x0[i], self.x_hist[i], int(self.index[i]),
                          None if self.labels is None else int(self.labels[i]))

    def subset(self, mask) -> "WindowSet":
        return WindowSet(self.x0[mask], self.x_hist[mask], self.index[mask],
                         None if self.labels is None else self.labels[mask])


def window_count(length: int, H: int, stride: int) -> int:
    return (length - H - 1) // stride + 1


def make_windows(values, H: int = 16, stride: int = 1, labels=None, offset: int = 0) -> WindowSet:
    """Sliding windows: x0 = values[t], x_hist = values[t-H:t], t = H, H+stride, ...

    ``index`` reports ``t + offset`` so windows cut from a slice keep global time.
    ``labels`` per window is the label of x0's row.
    """
    if isinstance(values, TimeSeriesDataset):
        labels = values.labels if labels is None else labels
        values = values.model_matrix()
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if H < 1 or stride < 1:
        raise ValueError(f"H and stride must be >= 1, got H={H}, stride={stride}")
    L = values.shape[0]
    if L <= H or window_count(L, H, stride) < 1:
        raise ValueError(f"series of length {L} too short for history {H}")
    t = np.arange(H, L, stride)
    hist_idx = t[:, None] + np.arange(-H, 0)[None, :]
    win_labels = None if labels is None else np.asarray(labels, dtype=np.int64)[t]
    return WindowSet(values[t], values[hist_idx], t + offset, win_labels)


def normal_windows(values, labels, H: int, stride: int = 1) -> WindowSet:
    """Windows whose current row and whole history are labelled normal."""
    ws = make_windows(values, H, stride, labels)
    if labels is None:
        return ws
    lab = np.asarray(labels)
    t = ws.index
    clean = np.array([not lab[i - H:i + 1].any() for i in t], dtype=bool)
    return ws.subset(clean)


# ---------------------------------------------------------------- synthetic data

@dataclass
class Fault:
    onset: int
    duration: int
    type: str = "mean-shift"
    magnitude: float = 4.0
    channels: list | None = None


@dataclass
class SyntheticSpec:
    channels: int = 8
    length: int = 10000
    ar: list | float = 0.5
    mixing: list | None = None
    mixing_scale: float = 0.3
    noise_std: float = 1.0
    faults: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.faults = [f if isinstance(f, Fault) else _parse_fault(f) for f in self.faults]
        self.validate()

    def ar_coefficients(self) -> np.ndarray:
        ar = np.asarray(self.ar, dtype=np.float64)
        return np.broadcast_to(ar, (self.channels,)).copy()

    def validate(self) -> None:
        if self.channels < 1 or self.length < 2:
            raise ValueError("channels must be >= 1 and length >= 2")
        ar = np.asarray(self.ar, dtype=np.float64)
        if ar.ndim > 1 or (ar.ndim == 1 and ar.size != self.channels):
            raise ValueError(f"ar must be a scalar or {self.channels} values")
        if np.any(np.abs(ar) >= 1):
            raise ValueError("AR coefficients must lie in (-1, 1)")
        if self.mixing is not None and np.shape(self.mixing) != (self.channels, self.channels):
            raise ValueError(f"mixing must be {self.channels}x{self.channels}")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        for f in self.faults:
            if f.type not in FAULT_TYPES:
                raise ValueError(f"fault type {f.type!r} not in {FAULT_TYPES}")
            if f.onset < 0 or f.duration < 1 or f.onset + f.duration > self.length:
                raise ValueError(f"fault [{f.onset}, {f.onset + f.duration}) outside series "
                                 f"of length {self.length}")
            if f.channels is not None and any(not 0 <= c < self.channels for c in f.channels):
                raise ValueError(f"fault channels {f.channels} out of range")

    def to_dict(self) -> dict:
        blob = asdict(self)
        blob["faults"] = [asdict(f) for f in self.faults]
        return blob


def _parse_fault(blob: dict) -> Fault:
    known = {"onset", "duration", "type", "magnitude", "channels"}
    unknown = set(blob) - known
    if unknown:
        raise ValueError(f"unknown fault key(s): {', '.join(sorted(unknown))}")
    return Fault(**blob)


def parse_synthetic_spec(blob: dict) -> SyntheticSpec:
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(blob) - known
    if unknown:
        raise ValueError(f"unknown synthetic spec key(s): {', '.join(sorted(unknown))}")
    return SyntheticSpec(**blob)


def load_synthetic_spec(path) -> SyntheticSpec:
    with open(path) as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(blob, dict):
        raise ValueError(f"{path}: synthetic spec must be a JSON object")
    return parse_synthetic_spec(blob)


def _ar1(gen, phi, n, sigma):
    z = np.empty((n, phi.size))
    z[0] = gen.normal(0.0, sigma / np.sqrt(1.0 - phi ** 2))
    eta = gen.normal(0.0, sigma, size=(n, phi.size))
    for t in range(1, n):
        z[t] = phi * z[t - 1] + eta[t]
    return z


def synth_generate(spec: SyntheticSpec) -> TimeSeriesDataset:
    spec.validate()
    rng = nx.Rng(spec.seed)
    C, L = spec.channels, spec.length
    phi = spec.ar_coefficients()
    if spec.mixing is None:
        gen = rng.child("mixing").generator()
        mixing = np.eye(C) + spec.mixing_scale * gen.normal(size=(C, C)) / np.sqrt(C)
    else:
        mixing = np.asarray(spec.mixing, dtype=np.float64)
    z = _ar1(rng.child("latent").generator(), phi, L, spec.noise_std)
    x = z @ mixing.T
    latent_var = spec.noise_std ** 2 / (1.0 - phi ** 2)
    sigma = np.sqrt((mixing ** 2) @ latent_var)
    labels = np.zeros(L, dtype=np.int64)
    for i, f in enumerate(spec.faults):
        span = slice(f.onset, f.onset + f.duration)
        chans = np.arange(C) if f.channels is None else np.asarray(f.channels)
        gen = rng.child(f"fault{i}").generator()
        if f.type == "mean-shift":
            x[span, chans] += f.magnitude * sigma[chans]
        elif f.type == "variance-burst":
            x[span, chans] += f.magnitude * sigma[chans] * gen.standard_normal((f.duration, chans.size))
        else:
            # independent AR(1) with the channel's marginal scale: cross-channel structure is lost
            fresh = _ar1(gen, phi[chans], f.duration, 1.0)
            fresh *= np.sqrt(1.0 - phi[chans] ** 2)
            x[span, chans] = f.magnitude * sigma[chans] * fresh
        labels[span] = 1
    names = [f"ch{c}" for c in range(C)]
    return TimeSeriesDataset(x, names, labels=labels)
