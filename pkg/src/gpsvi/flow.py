"""Volume-preserving additive-coupling flow.

Each layer keeps the coordinates in ``A`` and shifts those in ``B`` by a network of ``A``,
so the Jacobian is unit-triangular and the log-determinant is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import MLP, Params
from .tensor import Tensor


class CouplingLayer:
    def __init__(self, d: int, A, B, h: Callable[[Tensor], Tensor]):
        A = np.asarray(A, dtype=np.int64)
        B = np.asarray(B, dtype=np.int64)
        if d < 2:
            raise ConfigError(f"coupling needs d >= 2, got {d}")
        if len(A) < 1 or len(B) < 1:
            raise ConfigError("both partition blocks must be non-empty")
        if sorted(np.concatenate([A, B]).tolist()) != list(range(d)):
            raise ConfigError(f"A={A.tolist()} and B={B.tolist()} must partition range({d})")
        self.d = d
        self.A, self.B = A, B
        self.h = h
        self._restore = np.argsort(np.concatenate([A, B]))

    @classmethod
    def alternating(cls, params: Params, name: str, d: int, parity: int, hidden: int,
                    rng: np.random.Generator) -> "CouplingLayer":
        """Even/odd split; ``parity`` picks which half conditions the other."""
        if d < 2:
            raise ConfigError(f"coupling needs d >= 2, got {d}")
        idx = np.arange(d)
        A, B = idx[idx % 2 == parity], idx[idx % 2 != parity]
        net = MLP(params, name, [len(A), hidden, len(B)], rng, out_scale=0.5)
        return cls(d, A, B, net)

    def _split(self, z: Tensor):
        return z[..., self.A], z[..., self.B]

    def _join(self, za: Tensor, zb: Tensor) -> Tensor:
        return T.concat([za, zb], axis=-1)[..., self._restore]

    def forward(self, z: Tensor) -> Tensor:
        za, zb = self._split(z)
        return self._join(za, zb + self.h(za))

    def inverse(self, z: Tensor) -> Tensor:
        za, zb = self._split(z)
        return self._join(za, zb - self.h(za))


@dataclass
class FlowStack:
    layers: list[CouplingLayer]

    @classmethod
    def build(cls, params: Params, d: int, n_layers: int, hidden: int | None,
              rng: np.random.Generator, name: str = "flow") -> "FlowStack":
        if n_layers and d < 2:
            raise ConfigError(f"flow needs d >= 2, got {d}")
        hidden = hidden or d
        return cls([CouplingLayer.alternating(params, f"{name}.{k}", d, k % 2, hidden, rng)
                    for k in range(n_layers)])

    def __len__(self):
        return len(self.layers)


def flow_forward(z0, fs: FlowStack) -> tuple[Tensor, float]:
    z = T.as_tensor(z0)
    if z.shape[-1] < 2:
        raise ConfigError(f"flow needs d >= 2, got {z.shape[-1]}")
    for layer in fs.layers:
        z = layer.forward(z)
    # additive coupling: every layer contributes log|det| = 0
    return z, 0.0


def flow_inverse(zK, fs: FlowStack) -> Tensor:
    z = T.as_tensor(zK)
    for layer in reversed(fs.layers):
        z = layer.inverse(z)
    return z


def numerical_jacobian(fs: FlowStack, z: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    J = np.empty((d, d))
    with T.no_grad():
        for j in range(d):
            e = np.zeros(d)
            e[j] = eps
            up = flow_forward(z + e, fs)[0].values
            down = flow_forward(z - e, fs)[0].values
            J[:, j] = (up - down) / (2 * eps)
    return J


def variance_preservation_check(fs: FlowStack, mean, std, n: int = 100_000, seed: int = 0) -> dict:
    """Push Gaussian draws through the flow and compare generalized variances.

    ``log_ratio_se`` is the large-sample standard error of a log sample-covariance
    determinant, sqrt(2 d / n), doubled for the difference of two such estimates.
    """
    if n < 100_000:
        raise ConfigError("variance check needs at least 1e5 draws")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    d = mean.shape[-1]
    rng = np.random.default_rng(seed)
    z0 = mean + std * rng.standard_normal((n, d))
    with T.no_grad():
        zK = flow_forward(T.Tensor(z0), fs)[0].values
    _, logdet0 = np.linalg.slogdet(np.cov(z0, rowvar=False))
    _, logdetK = np.linalg.slogdet(np.cov(zK, rowvar=False))
    return {
        "n": n,
        "det_cov_z0": float(np.exp(logdet0)),
        "det_cov_zK": float(np.exp(logdetK)),
        "ratio": float(np.exp(logdetK - logdet0)),
        "log_ratio": float(logdetK - logdet0),
        "log_ratio_se": float(np.sqrt(2 * 2 * d / n)),
        "var_z0": np.var(z0, axis=0).tolist(),
        "var_zK": np.var(zK, axis=0).tolist(),
    }
