"""Group-prior sampler: posterior scale network, group interest, projected sampling, subspace KL,
and the monotone scale regularizer."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateGroupError
from .nn import MLP, Linear, Params
from .tensor import Tensor

log = logging.getLogger(__name__)

ORTHOGONAL = "orthogonal"
PAPER_COSINE = "paper-cosine"
PROJECTION_MODES = (ORTHOGONAL, PAPER_COSINE)

EPS_G = 1e-6
LOG_SIGMA_MIN = float(np.log(1e-8))
LOG_SIGMA_MAX = float(np.log(1e3))
MAX_ALL_PAIRS = 64

warning_counts: Counter = Counter()


@dataclass
class PosteriorParams:
    mu: Tensor
    s: Tensor
    sigma: Tensor


@dataclass
class GroupPrior:
    g: Tensor
    norm: Tensor
    # rows whose ||g|| clears eps_g; the others get no stochastic correction
    valid: np.ndarray

    @property
    def unit(self) -> Tensor:
        valid = self.valid.astype(np.float64)
        return _scale_rows(T.div(valid, self.norm + (1.0 - valid)), self.g)


@dataclass
class LatentSample:
    z: Tensor
    xi: np.ndarray


def _scale_rows(coef, x: Tensor) -> Tensor:
    """Multiply each trailing-axis vector of ``x`` by the matching entry of ``coef``."""
    coef = T.as_tensor(coef)
    if coef.ndim == 0:
        return coef * x
    return T.broadcast(T.reshape(coef, coef.shape + (1,)), x.shape) * x


def length_feature(lengths) -> np.ndarray:
    return np.log1p(np.asarray(lengths, dtype=np.float64))


class SigmaNetwork:
    """One linear layer on ``[v, log(1 + l_u)]``; its output is the log scale ``s``."""

    def __init__(self, params: Params, d: int, rng: np.random.Generator, name: str = "sigma",
                 init_sigma: float = 1.0):
        self.linear = Linear(params, name, d + 1, d, rng, scale=0.1)
        self.linear.b.values = np.full(d, np.log(init_sigma))

    def __call__(self, v: Tensor, lengths) -> Tensor:
        feat = length_feature(lengths)
        feat = feat.reshape(feat.shape + (1,))
        return self.linear(T.concat([v, T.Tensor(feat)], axis=-1))


def posterior_params(v: Tensor, lengths, net: SigmaNetwork,
                     s_min: float = LOG_SIGMA_MIN, s_max: float = LOG_SIGMA_MAX) -> PosteriorParams:
    s = T.clamp(net(v, lengths), s_min, s_max)
    return PosteriorParams(mu=v, s=s, sigma=T.exp(s))


class GroupPriorNetwork:
    def __init__(self, params: Params, n_in: int, hidden: int, d: int, rng: np.random.Generator,
                 name: str = "prior"):
        self.mlp = MLP(params, name, [n_in, hidden, d], rng)

    def __call__(self, group_emb: Tensor, item_emb: Tensor) -> Tensor:
        return self.mlp(T.concat([group_emb, item_emb], axis=-1))


def group_prior(g: Tensor, eps_g: float = EPS_G, strict: bool = False) -> GroupPrior:
    norm = T.l2norm(g, zero_ok=True)
    valid = np.asarray(norm.values >= eps_g)
    if strict and not valid.all():
        raise DegenerateGroupError(f"group interest norm {norm.values.min():.3g} below eps_g={eps_g}")
    return GroupPrior(g=g, norm=norm, valid=valid)


def project_onto(g, y, mode: str = ORTHOGONAL, eps_g: float = EPS_G, strict: bool = True) -> Tensor:
    """Project ``y`` using the direction ``g`` (batched over leading axes).

    ``orthogonal`` applies ``g g^T / ||g||^2``; ``paper-cosine`` rescales ``y`` by its cosine
    with ``g``.  With ``strict`` a short ``g`` raises, otherwise those rows project to 0.
    """
    if mode not in PROJECTION_MODES:
        raise ValueError(f"unknown projection mode {mode!r}")
    gp = g if isinstance(g, GroupPrior) else group_prior(T.as_tensor(g), eps_g, strict=strict)
    y = T.as_tensor(y)
    valid = gp.valid.astype(np.float64)
    gnorm = gp.norm + (1.0 - valid)
    if mode == ORTHOGONAL:
        coef = T.dot(y, gp.g) / (gnorm * gnorm) * valid
        return _scale_rows(coef, gp.g)
    ynorm = T.l2norm(y, zero_ok=True)
    ynorm = ynorm + (ynorm.values == 0).astype(np.float64)
    coef = T.dot(y, gp.g) / (ynorm * gnorm) * valid
    return _scale_rows(coef, y)


def sample_latent(p: PosteriorParams, gp: GroupPrior, xi, mode: str = ORTHOGONAL) -> LatentSample:
    xi = np.asarray(xi, dtype=np.float64)
    noise = p.sigma * T.Tensor(xi)
    return LatentSample(z=p.mu + project_onto(gp, noise, mode), xi=xi)


def kl_projected(p: PosteriorParams, gp: GroupPrior) -> Tensor:
    """KL between the in-span 1-D marginal of the posterior and N(0, 1).

    With unit direction u: mean m = <mu, u>, variance v = sum_i u_i^2 sigma_i^2,
    KL = (v + m^2 - 1 - log v) / 2.  Rows with a degenerate group direction give 0.
    """
    u = gp.unit
    m = T.dot(p.mu, u)
    var = T.dot(p.sigma * p.sigma, u * u)
    valid = gp.valid.astype(np.float64)
    # degenerate rows have u = 0; give them var = 1 so the log stays finite, then zero them
    var = var + (1.0 - valid)
    return 0.5 * (var + m * m - 1.0 - T.log(var)) * valid


def regularizer_pairs(lengths, rng: np.random.Generator | None = None,
                      max_all_pairs: int = MAX_ALL_PAIRS) -> tuple[np.ndarray, np.ndarray]:
    """(longer, shorter) index pairs with strictly different lengths.

    All pairs for small batches, else ``max_all_pairs * n`` uniformly drawn pairs.
    """
    lengths = np.asarray(lengths)
    n = len(lengths)
    if n <= max_all_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        i = rng.integers(n, size=max_all_pairs * n)
        j = rng.integers(n, size=max_all_pairs * n)
    keep = lengths[i] != lengths[j]
    i, j = i[keep], j[keep]
    first_longer = lengths[i] > lengths[j]
    return np.where(first_longer, i, j), np.where(first_longer, j, i)


def monotonic_regularizer(sigma: Tensor, lengths, rng: np.random.Generator | None = None,
                          max_all_pairs: int = MAX_ALL_PAIRS) -> Tensor:
    """Sum over pairs and dimensions of max(0, sigma_longer - sigma_shorter)."""
    sigma = T.as_tensor(sigma)
    if sigma.shape[0] < 2:
        warning_counts["monotonic_regularizer_small_batch"] += 1
        log.debug("monotonic regularizer needs >= 2 examples; got %d", sigma.shape[0])
        return T.Tensor(0.0)
    longer, shorter = regularizer_pairs(lengths, rng, max_all_pairs)
    if len(longer) == 0:
        return T.sum_(sigma * 0.0)
    return T.sum_(T.max0(T.take(sigma, longer) - T.take(sigma, shorter)))
