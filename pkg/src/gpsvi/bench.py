"""Synthetic benchmark: the attention baseline against GPSVI and its two ablations over several seeds."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import variational as V
from .data import SynthConfig, split_head_tail
from .nn import atomic_write, dumps
from .reports import mask_sensitivity, variance_report, variance_trend
from .train import DataSource, RunConfig, Seeds, evaluate, resolve_data, train_model

# Training settings shared by every arm.  The KL weight is small because at 1.0 it
# pulls every user's in-span variance to 1, head users included.
BENCHMARK_SETTINGS = dict(
    epochs=10,
    lr=3e-3,
    batch_size=128,
    projection_mode=V.PAPER_COSINE,
    beta=0.01,
    lambda_m=1e-3,
    sigma_init=0.3,
)

ARMS = {
    "attn": {"variant": "attn"},
    "gpsvi": {"variant": "gpsvi"},
    "gpsvi_wo_VPF": {"variant": "gpsvi", "use_flow": False},
    "gpsvi_wo_MR": {"variant": "gpsvi", "use_monotonic_reg": False},
}


def benchmark_config(arm: str, seed: int, synth: SynthConfig | None = None, **overrides) -> RunConfig:
    synth = synth or SynthConfig()
    kw = {**BENCHMARK_SETTINGS, **ARMS[arm], **overrides}
    return RunConfig(seeds=Seeds(seed, seed, seed),
                     data=DataSource(synthetic=synth.to_json(), synthetic_seed=seed), **kw)


@dataclass
class ArmResult:
    arm: str
    seed: int
    auc: dict
    variance_rho: float | None = None
    variance_rows: list = field(default_factory=list)
    sensitivity_tail_norm: float | None = None
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "auc": self.auc,
            "variance_rho": self.variance_rho,
            "variance_rows": [[r.bin_lo, r.bin_hi, r.n_users, r.mean_sigma] for r in self.variance_rows],
            "sensitivity_tail_norm": self.sensitivity_tail_norm,
        }


def run_arm(arm: str, seed: int, synth: SynthConfig | None = None, **overrides) -> ArmResult:
    t0 = time.perf_counter()
    cfg = benchmark_config(arm, seed, synth, **overrides)
    train_ds, test_ds = resolve_data(cfg)
    segments = split_head_tail(test_ds, cfg.head_quantile)
    model = train_model(cfg, train_ds).model
    res = ArmResult(arm, seed, evaluate(model, test_ds, segments))
    if model.is_variational:
        res.variance_rows = variance_report(model, test_ds)
        res.variance_rho = variance_trend(res.variance_rows)
    sens = mask_sensitivity(model, test_ds, segments)
    res.sensitivity_tail_norm = float(np.linalg.norm(sens["tail"]))
    res.seconds = time.perf_counter() - t0
    return res


@dataclass
class BenchmarkResult:
    seeds: list[int]
    runs: dict[str, list[ArmResult]]

    def mean_auc(self, arm: str, segment: str) -> float:
        return float(np.mean([r.auc[segment] for r in self.runs[arm]]))

    def delta(self, arm: str, base: str, segment: str) -> float:
        """Mean over seeds of the paired AUC difference ``arm - base``."""
        return float(np.mean([a.auc[segment] - b.auc[segment] for a, b in zip(self.runs[arm], self.runs[base])]))

    def rhos(self, arm: str) -> list[float]:
        return [r.variance_rho for r in self.runs[arm]]

    def summary(self) -> dict:
        out = {"seeds": self.seeds, "settings": BENCHMARK_SETTINGS, "mean_auc": {}, "delta_vs_attn": {}}
        for arm in self.runs:
            out["mean_auc"][arm] = {s: self.mean_auc(arm, s) for s in ("all", "head", "tail")}
            if arm != "attn" and "attn" in self.runs:
                out["delta_vs_attn"][arm] = {s: self.delta(arm, "attn", s) for s in ("all", "head", "tail")}
        out["variance_rho"] = {arm: self.rhos(arm) for arm in self.runs if arm != "attn"}
        out["runs"] = {arm: [r.to_json() for r in rs] for arm, rs in self.runs.items()}
        return out


def run_benchmark(seeds=range(5), arms=tuple(ARMS), synth: SynthConfig | None = None,
                  out_dir: str | os.PathLike | None = None, progress=None) -> BenchmarkResult:
    seeds = list(seeds)
    runs: dict[str, list[ArmResult]] = {arm: [] for arm in arms}
    for seed in seeds:
        for arm in arms:
            res = run_arm(arm, seed, synth)
            runs[arm].append(res)
            if progress is not None:
                progress(res)
    result = BenchmarkResult(seeds, runs)
    if out_dir is not None:
        atomic_write(Path(out_dir) / "benchmark.json", dumps(result.summary()) + "\n")
    return result

