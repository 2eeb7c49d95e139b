"""Point-wise and event-level detection metrics.

Zero-denominator convention: a ratio whose denominator is zero is 1 when its
numerator side is also empty (nothing predicted and nothing to find), and 0
otherwise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

DEFAULT_TAU = 50


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


def _binary(a, name) -> np.ndarray:
    a = np.asarray(a).ravel()
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} labels must be 0/1")
    return a.astype(bool)


def _pair(pred, true):
    p, t = _binary(pred, "predicted"), _binary(true, "true")
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return p, t


def confusion(pred, true) -> ConfusionCounts:
    p, t = _pair(pred, true)
    return ConfusionCounts(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)),
                           int(np.sum(~p & ~t)))


def _ratio(num: int, den: int, empty: bool) -> float:
    if den == 0:
        return 1.0 if empty else 0.0
    return num / den


def pointwise_metrics(pred, true) -> dict:
    c = confusion(pred, true)
    none = c.TP + c.FP == 0 and c.TP + c.FN == 0
    precision = _ratio(c.TP, c.TP + c.FP, none)
    recall = _ratio(c.TP, c.TP + c.FN, none)
    f1 = 1.0 if none else (0.0 if precision + recall == 0 else
                           2 * precision * recall / (precision + recall))
    accuracy = (c.TP + c.TN) / c.total if c.total else 1.0
    return {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy, **asdict(c)}


def runs(labels) -> list:
    """Maximal runs of ones as half-open (start, end) pairs."""
    a = np.concatenate([[0], _binary(labels, "run").astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(a))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def event_metrics(pred, true, tau: int = DEFAULT_TAU) -> dict:
    """Event-level scores with detection tolerance ``tau`` after each onset.

    An event [s, e) is detected if any prediction falls in [s, max(e, s + tau + 1)).
    A prediction run is a false alarm when every one of its points lies more
    than ``tau`` samples away from every event.
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    p, t = _pair(pred, true)
    events = runs(t)
    near = t.copy()
    for s, e in events:
        near[max(s - tau, 0):min(e + tau, p.size)] = True
    detected = sum(bool(p[s:max(e, min(s + tau + 1, p.size))].any()) for s, e in events)
    pred_runs = runs(p)
    false_runs = [r for r in pred_runs if not near[r[0]:r[1]].any()]
    none = not events and not pred_runs
    recall = _ratio(detected, len(events), none)
    precision = _ratio(len(pred_runs) - len(false_runs), len(pred_runs), none)
    f1 = 1.0 if none else (0.0 if precision + recall == 0 else
                           2 * precision * recall / (precision + recall))
    return {"precision": precision, "recall": recall, "f1": f1, "events": len(events),
            "detected": detected, "prediction_runs": len(pred_runs),
            "false_alarm_runs": len(false_runs), "tau": int(tau)}


def auroc(scores, true) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve, ties averaged."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _binary(true, "true")
    if s.size != t.size:
        raise ValueError("length mismatch between scores and labels")
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    r = rankdata(s)
    return float((r[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def report(pred, true, tau: int = DEFAULT_TAU) -> dict:
    return {"pointwise": pointwise_metrics(pred, true), "event": event_metrics(pred, true, tau)}


def write_report(path, rep: dict) -> None:
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
