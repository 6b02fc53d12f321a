"""Small oracle suites: gradient check of the full loss, KL against Monte Carlo, flow
round trip, and rank AUC against pair counting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import variational as V
from .data import ExampleRecord, Dataset, Vocab, make_batch
from .flow import FlowStack, flow_forward, flow_inverse
from .metrics import auc, auc_bruteforce
from .nn import Params
from .train import RunConfig, assemble_loss
from .models import CTRModel


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def tiny_problem(seed: int, d: int = 8, seq_len: int = 6, flow_layers: int = 2, n: int = 4):
    """A small gpsvi model, a batch whose longest history has ``seq_len`` items, and fixed noise."""
    rng = np.random.default_rng(seed)
    vocab = Vocab(n_items=7, n_contexts=2, group_sizes=(2, 3), max_seq_len=seq_len)
    records = []
    for i in range(n):
        length = seq_len if i == 0 else int(rng.integers(0, seq_len + 1))
        records.append(ExampleRecord(
            user_id=i, group=(int(rng.integers(2)), int(rng.integers(3))), item_id=int(rng.integers(7)),
            context_id=int(rng.integers(2)), behaviors=tuple(int(b) for b in rng.integers(7, size=length)),
            label=int(rng.integers(2))))
    ds = Dataset(records, vocab)
    cfg = RunConfig(variant="gpsvi", d=d, decoder_hidden=[8], flow_layers=flow_layers, flow_hidden=4,
                    prior_hidden=4, lambda_m=0.5, beta=1.0)
    model = CTRModel(vocab, cfg.model_config(), seed=seed)
    # random draws so the check does not sit at the small initial scale
    for t in model.params.tensors():
        t.values = rng.normal(scale=0.5, size=t.shape)
    batch = make_batch(ds.arrays(), np.arange(n))
    xi = rng.standard_normal((n, d))
    return model, batch, cfg, xi


def full_loss_grad_error(seed: int, d: int = 8, seq_len: int = 6, flow_layers: int = 2) -> float:
    model, batch, cfg, xi = tiny_problem(seed, d, seq_len, flow_layers)
    rng_seed = seed + 1

    def loss(*_params):
        return assemble_loss(batch, model, cfg, np.random.default_rng(rng_seed), xi=xi).total

    return T.grad_check(loss, model.params.tensors())


def kl_monte_carlo(mu, sigma, g, n: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo KL of the in-span coordinate of orthogonal-mode samples against N(0, 1).

    Returns (estimate, standard error).
    """
    rng = np.random.default_rng(seed)
    mu, sigma, g = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, g))
    u = g / np.linalg.norm(g)
    xi = rng.standard_normal((n, len(mu)))
    with T.no_grad():
        post = V.PosteriorParams(T.Tensor(np.broadcast_to(mu, xi.shape)), T.Tensor(np.log(sigma)),
                                 T.Tensor(np.broadcast_to(sigma, xi.shape)))
        gp = V.group_prior(T.Tensor(np.broadcast_to(g, xi.shape)))
        z = V.sample_latent(post, gp, xi).z.values
    t = z @ u
    # density of t under the sampler, from the sampler's own empirical moments
    m, var = float(t.mean()), float(t.var())
    log_q = -0.5 * (math.log(2 * math.pi * var) + (t - m) ** 2 / var)
    log_p = -0.5 * (math.log(2 * math.pi) + t ** 2)
    ratio = log_q - log_p
    return float(ratio.mean()), float(ratio.std() / math.sqrt(n))


def check_grad(n_draws: int = 3) -> CheckResult:
    worst = max(full_loss_grad_error(s, d=4, seq_len=3) for s in range(n_draws))
    return CheckResult("grad_check", bool(worst < 1e-4), f"max rel err {worst:.2e} over {n_draws} draws")


def check_kl(n_cases: int = 3, n_draws: int = 200_000) -> CheckResult:
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(n_cases):
        d = 4
        mu, sigma, g = rng.normal(size=d) * 0.7, np.exp(rng.normal(size=d) * 0.4), rng.normal(size=d)
        with T.no_grad():
            post = V.PosteriorParams(T.Tensor(mu[None]), T.Tensor(np.log(sigma)[None]), T.Tensor(sigma[None]))
            closed = float(V.kl_projected(post, V.group_prior(T.Tensor(g[None]))).values[0])
        est, se = kl_monte_carlo(mu, sigma, g, n_draws, seed=k)
        worst = max(worst, abs(est - closed) / se)
    return CheckResult("kl_monte_carlo", worst < 3.0, f"worst gap {worst:.2f} standard errors")


def check_flow(n: int = 200) -> CheckResult:
    worst = 0.0
    for k in (1, 2, 4):
        params = Params()
        fs = FlowStack.build(params, 6, k, 6, np.random.default_rng(k))
        z = np.random.default_rng(10 + k).normal(size=(n, 6))
        with T.no_grad():
            back = flow_inverse(flow_forward(T.Tensor(z), fs)[0], fs).values
        worst = max(worst, float(np.abs(back - z).max()))
    return CheckResult("flow_round_trip", worst < 1e-9, f"max round-trip error {worst:.1e}")


def check_auc(n_cases: int = 50) -> CheckResult:
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(n_cases):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 5, size=n).astype(float)
        mismatches += auc(scores, labels) != auc_bruteforce(scores, labels)
    return CheckResult("auc_bruteforce", mismatches == 0, f"{mismatches} mismatches in {n_cases} cases")


def run_all() -> list[CheckResult]:
    return [check_grad(), check_kl(), check_flow(), check_auc()]
