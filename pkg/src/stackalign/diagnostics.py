"""Gradient-norm ratios per network component and per-dimension feature statistics."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import global_norm

GROUPS = ("VideoStack", "TextStack", "ActionMatchedStacks", "FC")
DEFAULT_PREFIXES = {
    "video.": "VideoStack",
    "text.": "TextStack",
    "action.": "ActionMatchedStacks",
    "matched.": "ActionMatchedStacks",
    "head.": "FC",
}
RATIO_FIELDS = ("epoch", "group", "ratio")
FEATURE_FIELDS = ("epoch", "stack", "dim", "mean", "variance")
METRIC_FIELDS = ("epoch", "split", "video_accuracy", "text_iou", "action_accuracy", "loss", "lr")


class ShortWindowWarning(UserWarning):
    pass


@dataclass
class ComponentGrouping:
    prefixes: dict = field(default_factory=lambda: dict(DEFAULT_PREFIXES))

    def group_of(self, name: str) -> str:
        for prefix, group in self.prefixes.items():
            if name.startswith(prefix):
                return group
        raise KeyError(f"parameter {name!r} belongs to no reporting group")

    def split(self, params):
        out = {g: [] for g in dict.fromkeys(self.prefixes.values())}
        for p in params:
            out[self.group_of(p.name)].append(p)
        return out


@dataclass
class DiagnosticsLog:
    ratios: list = field(default_factory=list)         # (epoch, group, ratio)
    feature_stats: list = field(default_factory=list)  # (epoch, stack, dim, mean, variance)

    def _check_epoch(self, rows, epoch):
        if rows and epoch < rows[-1][0]:
            raise ValueError(f"epoch {epoch} recorded after epoch {rows[-1][0]}")


def gradient_ratio(params) -> float:
    g = global_norm(params, "grad")
    if g == 0.0:
        return math.inf
    return global_norm(params, "value") / g


def record_ratio(log: DiagnosticsLog, epoch: int, params, grouping: ComponentGrouping | None = None):
    """Append ||w|| / ||grad|| for each component group (``inf`` for a zero gradient)."""
    log._check_epoch(log.ratios, epoch)
    grouping = grouping or ComponentGrouping()
    for group, ps in grouping.split(params).items():
        log.ratios.append((epoch, group, gradient_ratio(ps)))


def feature_moments(features: np.ndarray, mask: np.ndarray | None, first_k: int = 50):
    """Per-dimension mean and (biased) variance over unpadded elements of a (B, T, H) batch."""
    h = features.reshape(-1, features.shape[-1])
    if mask is not None:
        h = h[mask.reshape(-1)]
    h = h[:, :first_k]
    return h.mean(axis=0), h.var(axis=0)


def record_feature_stats(log: DiagnosticsLog, epoch: int, stacks: dict, first_k: int = 50):
    """``stacks`` maps a stack name to ``(features (B, T, H), mask (B, T))``."""
    log._check_epoch(log.feature_stats, epoch)
    for name, (feats, mask) in stacks.items():
        mean, var = feature_moments(feats, mask, first_k)
        for d, (m, v) in enumerate(zip(mean, var)):
            log.feature_stats.append((epoch, name, d, float(m), float(v)))


def summarize(log: DiagnosticsLog, window: int = 20) -> dict:
    """Mean ratio per group over the last ``window`` recorded epochs, ignoring ``inf`` entries."""
    epochs = sorted({r[0] for r in log.ratios})
    short = len(epochs) < window
    if short:
        warnings.warn(f"only {len(epochs)} epochs recorded; averaging over all of them", ShortWindowWarning)
    keep = set(epochs[-window:])
    out = {"window": len(keep), "short_window": short, "groups": {}}
    for group in dict.fromkeys(r[1] for r in log.ratios):
        vals = [r[2] for r in log.ratios if r[1] == group and r[0] in keep]
        finite = [v for v in vals if math.isfinite(v)]
        out["groups"][group] = {
            "mean": float(np.mean(finite)) if finite else math.inf,
            "inf_count": len(vals) - len(finite),
        }
    g = out["groups"]
    if "TextStack" in g and "VideoStack" in g and g["VideoStack"]["mean"] not in (0.0, math.inf):
        out["text_over_video"] = g["TextStack"]["mean"] / g["VideoStack"]["mean"]
    return out


# -------------------------------------------------------------------- CSV

def _fmt(x):
    if isinstance(x, float):
        return "inf" if x == math.inf else repr(x)
    return "" if x is None else str(x)


class CsvAppender:
    """Append rows to a CSV file with a fixed header (written when the file is created)."""

    def __init__(self, path, header, resume: bool = False):
        self.path = Path(path)
        self.header = tuple(header)
        if not (resume and self.path.exists()):
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.header)

    def write(self, rows):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            for row in rows:
                w.writerow([_fmt(x) for x in row])


def truncate_csv(path, max_epoch: int):
    """Drop rows recorded after ``max_epoch`` (used when resuming from a checkpoint)."""
    path = Path(path)
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= max_epoch]
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(keep)


def read_ratios(path) -> DiagnosticsLog:
    log = DiagnosticsLog()
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            log.ratios.append((int(row["epoch"]), row["group"], float(row["ratio"])))
    return log


def read_feature_stats(path) -> DiagnosticsLog:
    log = DiagnosticsLog()
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            log.feature_stats.append((int(row["epoch"]), row["stack"], int(row["dim"]),
                                      float(row["mean"]), float(row["variance"])))
    return log


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
