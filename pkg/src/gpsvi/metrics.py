"""Ranking metrics."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    return scores, pos, n_pos, n_neg


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from midranks; tied pairs count one half.  O(n log n)."""
    scores, pos, n_pos, n_neg = _check(scores, labels)
    ranks = stats.rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Explicit count over all positive/negative pairs.  O(n_pos * n_neg)."""
    scores, pos, n_pos, n_neg = _check(scores, labels)
    sp = scores[pos][:, None]
    sn = scores[~pos][None, :]
    u = float((sp > sn).sum()) + 0.5 * float((sp == sn).sum())
    return float(u / (n_pos * n_neg))


def safe_auc(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return None


def spearman(x, y) -> float:
    rho = stats.spearmanr(x, y).statistic
    return float(rho)
