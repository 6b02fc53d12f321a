"""Diagnostic reports on trained models: posterior scale by history length, and how much
the latent interest moves when the behavior sequence is masked out."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, Segment, interaction_counts, make_batch, split_head_tail
from .errors import ConfigError
from .metrics import spearman
from .models import CTRModel
from .nn import atomic_write, format_float

# inclusive (lo, hi) length bins, roughly doubling
DEFAULT_BINS = ((0, 0), (1, 1), (2, 3), (4, 7), (8, 15), (16, 31), (32, 63), (64, 127), (128, 255), (256, 500))


@dataclass
class VarianceRow:
    bin_lo: int
    bin_hi: int
    n_users: int
    mean_sigma: float


def _batches(ds: Dataset, batch_size: int = 512):
    arrs = ds.arrays()
    for start in range(0, arrs.n, batch_size):
        yield make_batch(arrs, np.arange(start, min(start + batch_size, arrs.n)))


def per_user_sigma(model: CTRModel, ds: Dataset) -> dict[int, float]:
    """Mean posterior scale per user, averaged over dimensions and the user's records."""
    if not model.is_variational:
        raise ConfigError(f"variant {model.cfg.variant!r} has no posterior scale network")
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    with T.no_grad():
        for batch in _batches(ds):
            sigma = model.forward(batch).posterior.sigma.values.mean(axis=-1)
            for u, s in zip(batch.user.tolist(), sigma.tolist()):
                totals[u] = totals.get(u, 0.0) + s
                counts[u] = counts.get(u, 0) + 1
    return {u: totals[u] / counts[u] for u in totals}


def variance_report(model: CTRModel, ds: Dataset, bins=DEFAULT_BINS) -> list[VarianceRow]:
    """Mean sigma of the users whose interaction count falls in each bin; empty bins are dropped."""
    sigma = per_user_sigma(model, ds)
    lengths = interaction_counts(ds)
    users = np.array(sorted(sigma))
    l_u = np.array([lengths[u] for u in users])
    s_u = np.array([sigma[u] for u in users])
    rows = []
    for lo, hi in bins:
        if lo > hi:
            raise ConfigError(f"bad bin ({lo}, {hi})")
        inside = (l_u >= lo) & (l_u <= hi)
        if inside.any():
            rows.append(VarianceRow(int(lo), int(hi), int(inside.sum()), float(s_u[inside].mean())))
    return rows


def variance_trend(rows: list[VarianceRow]) -> float:
    """Spearman correlation between bin position and mean sigma (nan with fewer than 2 bins)."""
    if len(rows) < 2:
        return float("nan")
    return spearman(np.arange(len(rows)), [r.mean_sigma for r in rows])


def mask_sensitivity(model: CTRModel, ds: Dataset, segments: dict[int, Segment] | None = None,
                     head_quantile: float = 0.25) -> dict[str, np.ndarray]:
    """Per-dimension mean |z(behaviors) - z(no behaviors)| within the tail and head segments."""
    segments = segments if segments is not None else split_head_tail(ds, head_quantile)
    d = model.cfg.d
    sums = {Segment.TAIL: np.zeros(d), Segment.HEAD: np.zeros(d)}
    counts = {Segment.TAIL: 0, Segment.HEAD: 0}
    with T.no_grad():
        for batch in _batches(ds):
            z = model.forward(batch).z.values
            z_masked = model.forward(batch, behaviors_mask=np.zeros_like(batch.mask)).z.values
            diff = np.abs(z - z_masked)
            for seg in (Segment.TAIL, Segment.HEAD):
                rows = np.array([segments.get(int(u)) == seg for u in batch.user])
                sums[seg] += diff[rows].sum(axis=0)
                counts[seg] += int(rows.sum())
    return {
        "tail": sums[Segment.TAIL] / max(counts[Segment.TAIL], 1),
        "head": sums[Segment.HEAD] / max(counts[Segment.HEAD], 1),
    }


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_variance_csv(rows: list[VarianceRow], path: str | os.PathLike):
    atomic_write(path, _csv(["bin_lo", "bin_hi", "n_users", "mean_sigma"],
                            [[r.bin_lo, r.bin_hi, r.n_users, r.mean_sigma] for r in rows]))


def write_sensitivity_csv(sens: dict[str, np.ndarray], path: str | os.PathLike):
    rows = [[k, float(t), float(h)] for k, (t, h) in enumerate(zip(sens["tail"], sens["head"]))]
    atomic_write(path, _csv(["dim", "tail_mean_abs_diff", "head_mean_abs_diff"], rows))
