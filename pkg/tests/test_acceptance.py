"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line; the lines are repeated in the
terminal summary.  Criteria 6-8 share one 5-seed benchmark (several minutes on one core).
"""

import sys
import time

import numpy as np
import pytest

from gpsvi import tensor as T
from gpsvi import variational as V
from gpsvi.bench import run_benchmark
from gpsvi.cli import main
from gpsvi.data import SynthConfig, generate_synthetic, make_batch, split_head_tail
from gpsvi.flow import FlowStack, flow_forward, flow_inverse, numerical_jacobian
from gpsvi.metrics import auc, auc_bruteforce
from gpsvi.models import CTRModel
from gpsvi.nn import Params
from gpsvi.selftest import full_loss_grad_error, kl_monte_carlo
from gpsvi.train import RunConfig, evaluate, score, train_model

VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS[n] = line
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def test_1_gradient_integrity():
    t0 = time.perf_counter()
    errs = [full_loss_grad_error(seed, d=8, seq_len=6, flow_layers=2) for seed in range(20)]
    secs = time.perf_counter() - t0
    worst = max(errs)
    verdict(1, worst < 1e-4 and secs < 60, f"max rel err {worst:.2e} over 20 draws in {secs:.1f}s")


def test_2_kl_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    gaps = []
    for case in range(20):
        d = int(rng.integers(2, 9))
        mu = rng.normal(size=d)
        sigma = np.exp(rng.normal(scale=0.5, size=d))
        g = rng.normal(size=d)
        with T.no_grad():
            post = V.PosteriorParams(T.Tensor(mu[None]), T.Tensor(np.log(sigma)[None]), T.Tensor(sigma[None]))
            closed = float(V.kl_projected(post, V.group_prior(T.Tensor(g[None]))).values[0])
        est, se = kl_monte_carlo(mu, sigma, g, n=1_000_000, seed=case)
        gaps.append(abs(est - closed) / se)
    secs = time.perf_counter() - t0
    worst = max(gaps)
    verdict(2, worst < 3.0 and secs < 120, f"worst gap {worst:.2f} SE over 20 cases in {secs:.1f}s")


def test_3_flow_exactness():
    round_trip, det_gap, logdets = 0.0, 0.0, set()
    for k in (1, 2, 4, 8):
        fs = FlowStack.build(Params(), 8, k, 8, np.random.default_rng(k))
        z = np.random.default_rng(50 + k).normal(size=(1000, 8)) * 2
        with T.no_grad():
            zK, logdet = flow_forward(z, fs)
            back = flow_inverse(zK, fs).values
        logdets.add(logdet)
        round_trip = max(round_trip, float(np.abs(back - z).max()))
    for d in range(2, 9):
        fs = FlowStack.build(Params(), d, 4, d, np.random.default_rng(d))
        for z in np.random.default_rng(100 + d).normal(size=(5, d)):
            det_gap = max(det_gap, abs(np.linalg.det(numerical_jacobian(fs, z)) - 1.0))
    ok = round_trip < 1e-9 and det_gap <= 1e-6 and logdets == {0.0}
    verdict(3, ok, f"round trip {round_trip:.1e}, |det J - 1| {det_gap:.1e}, logdet values {sorted(logdets)}")


def test_4_degeneration_to_attention():
    ds = generate_synthetic(SynthConfig(n_users=600, n_items=60, max_seq_len=80), seed=4)
    base = dict(d=8, decoder_hidden=[16], epochs=1, batch_size=64, lr=3e-3)
    attn = train_model(RunConfig(variant="attn", **base), ds).model
    gp = CTRModel(ds.vocab, RunConfig(variant="gpsvi", use_flow=False, sigma_min=1e-8, sigma_max=1e-8,
                                      **base).model_config(), seed=9)
    gp.params.load_state(attn.params.state(), strict=False)
    y_attn = score(attn, ds)
    y_mean = score(gp, ds)
    # the sampled path must also collapse onto attention
    arrs = ds.arrays()
    rng = np.random.default_rng(0)
    with T.no_grad():
        y_sampled = np.concatenate([
            gp.forward(make_batch(arrs, idx), sample=True, rng=rng).probs
            for idx in np.array_split(np.arange(arrs.n), 8)])
    diff = max(np.abs(y_mean - y_attn).max(), np.abs(y_sampled - y_attn).max())
    seg = split_head_tail(ds)
    same_auc = evaluate(attn, ds, seg) == evaluate(gp, ds, seg)
    verdict(4, diff < 1e-6 and same_auc, f"max |y_gpsvi - y_attn| {diff:.1e}, identical AUC {same_auc}")


def test_5_auc_oracle():
    rng = np.random.default_rng(5)
    mismatches, ties_cases = 0, 0
    for i in range(200):
        n = int(rng.integers(2, 1001))
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        if i % 10 == 0:
            scores = np.full(n, 0.25)
            ties_cases += 1
        elif i % 2:
            scores = rng.integers(0, int(rng.integers(2, 20)), size=n) / 7.0
        else:
            scores = rng.normal(size=n)
        mismatches += auc(scores, labels) != auc_bruteforce(scores, labels)
    verdict(5, mismatches == 0, f"{mismatches} mismatches in 200 instances ({ties_cases} all-tied)")


@pytest.fixture(scope="module")
def benchmark():
    return run_benchmark(range(5))


@pytest.mark.slow
def test_6_variance_falls_with_length(benchmark):
    rhos = benchmark.rhos("gpsvi")
    per_seed = max(sum(r.seconds for rs in benchmark.runs.values() for r in rs if r.seed == s)
                   for s in benchmark.seeds)
    ok = all(r <= -0.8 for r in rhos) and per_seed < 600
    verdict(6, ok, f"spearman per seed {[round(r, 3) for r in rhos]}, slowest seed {per_seed:.0f}s (all arms)")


@pytest.mark.slow
def test_7_tail_lift(benchmark):
    tail = benchmark.delta("gpsvi", "attn", "tail")
    head = benchmark.delta("gpsvi", "attn", "head")
    ok = tail >= 0.005 and abs(head) <= 0.003
    verdict(7, ok, f"tail delta {tail:+.4f}, head delta {head:+.4f} (5 seeds)")


@pytest.mark.slow
def test_8_ablation_direction(benchmark):
    flow_gain = benchmark.delta("gpsvi", "gpsvi_wo_VPF", "tail")
    wo_mr = benchmark.rhos("gpsvi_wo_MR")
    breaks = any(r > -0.8 for r in wo_mr)
    verdict(8, flow_gain > 0 and breaks,
            f"tail(gpsvi) - tail(wo_VPF) {flow_gain:+.4f}; wo_MR spearman {[round(r, 3) for r in wo_mr]}")


def test_9_training_is_byte_reproducible(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"variant": "gpsvi", "d": 8, "decoder_hidden": [8], "epochs": 2, "batch_size": 64,'
                   ' "lr": 0.003, "data": {"synthetic": {"n_users": 500, "n_items": 50}, "synthetic_seed": 1}}')
    codes = [main(["train", "--config", str(cfg), "--out", str(tmp_path / out)]) for out in ("a", "b")]
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    b = (tmp_path / "b" / "metrics.json").read_bytes()
    verdict(9, codes == [0, 0] and a == b, f"exit codes {codes}, {len(a)} bytes, identical {a == b}")
