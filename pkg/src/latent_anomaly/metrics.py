"""Anomaly scores, z-normalisation, heatmap post-processing and metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    ConfigurationError,
    DegenerateStatsError,
    InvariantViolation,
    MetricUndefinedError,
    UndefinedMaskError,
)

MIN_ZSTATS_SAMPLES = 30
STAGES = ("raw", "z", "eroded")


def anomaly_score(z0, z0_hat) -> np.ndarray | float:
    """Mean squared difference over latent coordinates (last axis)."""
    z0 = np.asarray(z0, dtype=float)
    z0_hat = np.asarray(z0_hat, dtype=float)
    if z0.shape != z0_hat.shape:
        raise ConfigurationError(f"shape mismatch {z0.shape} vs {z0_hat.shape}")
    d = z0 - z0_hat
    out = np.mean(d * d, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ZStats:
    mean: float
    std: float
    source: str = ""


def fit_zstats(scores, source: str = "") -> ZStats:
    """Mean and population standard deviation of at least 30 scores."""
    s = np.asarray(scores, dtype=float).ravel()
    if s.size < MIN_ZSTATS_SAMPLES:
        raise DegenerateStatsError(f"need at least {MIN_ZSTATS_SAMPLES} scores, got {s.size}")
    std = float(s.std())
    if not std > 0:
        raise DegenerateStatsError("scores have zero variance")
    return ZStats(float(s.mean()), std, source)


def zscore(score, stats: ZStats):
    return (np.asarray(score, dtype=float) - stats.mean) / stats.std


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray
    slide_id: str = ""
    stage: str = "raw"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def to_z(self, stats: ZStats) -> "ScoreMap":
        if self.stage != "raw":
            raise InvariantViolation(f"z-scoring a {self.stage} map")
        return ScoreMap(zscore(self.values, stats), self.slide_id, "z")


def _require(m: ScoreMap, stage: str):
    if m.stage != stage:
        raise InvariantViolation(f"expected a {stage} map, got {m.stage}")


def erode(m: ScoreMap) -> ScoreMap:
    """Grayscale erosion with a 2x2 window anchored top-left, edges replicated."""
    _require(m, "z")
    return ScoreMap(_kernels.erode_2x2(m.values), m.slide_id, "eroded")


def slide_scores(m: ScoreMap) -> tuple[float, float]:
    """``(z_max, z_99)`` of an eroded map.

    ``z_99`` averages every cell at or above the value of rank
    ``floor(0.99 n) + 1`` (1-based, ascending), so maps of at most 100 cells
    give ``z_99 == z_max``.
    """
    _require(m, "eroded")
    v = np.sort(m.values.ravel())
    n = v.size
    thr = v[(99 * n) // 100]
    return float(v[-1]), float(v[v >= thr].mean())


def segment(m: ScoreMap) -> np.ndarray:
    _require(m, "eroded")
    return m.values > 0.0


# --------------------------------------------------------------------------
# ranking metrics


def _check_classes(pos, neg):
    pos = np.asarray(pos, dtype=float).ravel()
    neg = np.asarray(neg, dtype=float).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("AUC/AUPR need at least one positive and one negative")
    return pos, neg


def _avg_ranks(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], xs.size]
    run_rank = (starts + ends + 1) / 2.0          # mean of 1-based ranks start+1..end
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half."""
    pos, neg = _check_classes(pos_scores, neg_scores)
    r = _avg_ranks(np.concatenate([pos, neg]))
    u = r[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def aupr(pos_scores, neg_scores) -> float:
    """Average precision; tied scores enter the ranking together."""
    pos, neg = _check_classes(pos_scores, neg_scores)
    scores = np.concatenate([pos, neg])
    labels = np.r_[np.ones(pos.size), np.zeros(neg.size)]
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s)) + 1, s.size]       # exclusive group ends
    tp = np.cumsum(y)[ends - 1]
    new_tp = np.diff(np.r_[0.0, tp])
    precision = tp / ends
    return float(np.sum(new_tp * precision) / pos.size)


def dice_iou(pred, gt) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ConfigurationError("prediction and ground-truth masks differ in shape")
    g = int(gt.sum())
    if g == 0:
        raise UndefinedMaskError("DICE/IoU undefined for a mask without positives; use tnr")
    inter = int(np.sum(pred & gt))
    p = int(pred.sum())
    return 2.0 * inter / (p + g), inter / int(np.sum(pred | gt))


def tnr(pred) -> float:
    """Fraction of cells predicted negative (ground truth all-negative)."""
    pred = np.asarray(pred, dtype=bool)
    return float(np.mean(~pred))
