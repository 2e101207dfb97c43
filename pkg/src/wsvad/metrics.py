"""Score post-processing and ranking metrics.

All metrics work on pooled frame-level arrays in float64.  AUC follows
the Mann-Whitney convention (ties count half); AP is the mean of
precision-at-rank over positives with descending-score order and stable
index tie-breaks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MetricUndefinedError, ParameterError

log = logging.getLogger(__name__)

FAR_THRESHOLD = 0.5


@dataclass
class ScoreSeries:
    """Per-snippet anomaly scores plus their frame-expanded variant."""

    video_id: str
    snippet_scores: np.ndarray
    frame_scores: np.ndarray | None = None
    smoothed: bool = False


def smooth_scores(scores, kappa: int) -> np.ndarray:
    """Forward moving average: out[i] = mean(s[i : i+kappa]), truncated
    at the tail where fewer than kappa scores remain."""
    if kappa < 1:
        raise ParameterError(f"smoothing window must be >= 1, got {kappa}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ContractError("smooth_scores expects a 1-d series")
    if kappa == 1:
        return s.copy()
    t = s.shape[0]
    cs = np.concatenate([[0.0], np.cumsum(s)])
    ends = np.minimum(np.arange(t) + kappa, t)
    starts = np.arange(t)
    return (cs[ends] - cs[starts]) / (ends - starts)


def expand_to_frames(scores, n_frames: int, delta: int = 16) -> np.ndarray:
    """Repeat each snippet score ``delta`` times; residue frames take the
    last score, surplus snippet frames are truncated (and logged)."""
    s = np.asarray(scores, dtype=np.float64)
    t = s.shape[0]
    if t < 1:
        raise ContractError("cannot expand an empty score series")
    if delta < 1:
        raise ParameterError(f"delta must be >= 1, got {delta}")
    if n_frames < t * delta - delta + 1:
        raise ContractError(
            f"n_frames={n_frames} below the minimum {t * delta - delta + 1} for T={t}")
    out = np.repeat(s, delta)
    if n_frames > out.shape[0]:
        out = np.concatenate([out, np.full(n_frames - out.shape[0], s[-1])])
    elif n_frames < out.shape[0]:
        log.info("truncating %d expanded scores to %d frames", out.shape[0], n_frames)
        out = out[:n_frames]
    return out


def _check_binary(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0/1")


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties add half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary(y)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.shape[0], dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.shape[0]:
        j = i
        while j + 1 < s.shape[0] and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean precision-at-rank over the positives (the step-wise PR
    integral); descending scores, ties broken by stable index."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    _check_binary(y)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise MetricUndefinedError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1)
    cum_hits = np.cumsum(hits)
    ranks = np.arange(1, s.shape[0] + 1)
    precisions = cum_hits[hits] / ranks[hits]
    return float(precisions.sum() / n_pos)


def far(normal_frame_scores, threshold: float = FAR_THRESHOLD) -> float:
    """Fraction of normal frames scored above the threshold."""
    s = np.asarray(normal_frame_scores, dtype=np.float64)
    if s.size == 0:
        raise MetricUndefinedError("FAR needs at least one normal frame")
    return float((s > threshold).mean())
