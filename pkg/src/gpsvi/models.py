"""Embedding tables, behavior encoders (sum pooling, target attention, one-block
self-attention), the CTR decoder, and the model wrapper that wires in the
group-prior sampler and the flow."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from . import variational as V
from .data import Batch, Vocab
from .errors import ConfigError, ShapeError, UnknownIdError
from .flow import FlowStack, flow_forward
from .nn import MLP, Linear, Params
from .tensor import Tensor

VARIANTS = ("dnn", "attn", "trans_lite", "gpsvi")


@dataclass
class AttentionOutput:
    v: Tensor
    alpha: Tensor
    empty_history: np.ndarray


def target_attention(q, K, Vals, mask=None, scale: bool = False) -> AttentionOutput:
    """Softmax(q . k_l) weighted sum of value rows over unmasked positions.

    Accepts a single query (``q``: d, ``K``/``Vals``: L x d) or a batch
    (n x d, n x L x d).  Fully masked rows yield a zero vector.
    """
    q, K, Vals = T.as_tensor(q), T.as_tensor(K), T.as_tensor(Vals)
    single = q.ndim == 1
    if single:
        q, K, Vals = q.reshape(1, -1), K.reshape((1,) + K.shape), Vals.reshape((1,) + Vals.shape)
    n, L, d = K.shape
    if q.shape != (n, d) or Vals.shape[:2] != (n, L):
        raise ShapeError(f"target_attention: q {q.shape}, K {K.shape}, V {Vals.shape}")
    mask = np.ones((n, L)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(n, L)
    empty = mask.sum(axis=1) == 0
    if L == 0:
        alpha = T.Tensor(np.zeros((n, 0)))
        v = T.Tensor(np.zeros((n, Vals.shape[2])))
    else:
        logits = T.matmul(K, q.reshape(n, d, 1)).reshape(n, L)
        if scale:
            logits = logits * (1.0 / math.sqrt(d))
        alpha = T.softmax(logits, axis=-1, mask=mask)
        v = T.matmul(alpha.reshape(n, 1, L), Vals).reshape(n, Vals.shape[2])
    if single:
        return AttentionOutput(v.reshape(-1), alpha.reshape(-1), empty)
    return AttentionOutput(v, alpha, empty)


def sum_pool(Vals, mask=None) -> Tensor:
    Vals = T.as_tensor(Vals)
    single = Vals.ndim == 2
    if single:
        Vals = Vals.reshape((1,) + Vals.shape)
    n, L, d = Vals.shape
    mask = np.ones((n, L)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(n, L)
    out = T.matmul(T.Tensor(mask.reshape(n, 1, L)), Vals).reshape(n, d) if L else T.Tensor(np.zeros((n, d)))
    return out.reshape(-1) if single else out


class Embedding:
    def __init__(self, params: Params, name: str, n: int, d: int, rng: np.random.Generator, std: float):
        self.name = name
        self.n = n
        self.table = params.add(name, rng.normal(scale=std, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            bad = ids[(ids < 0) | (ids >= self.n)][0]
            raise UnknownIdError(f"{self.name}: id {int(bad)} not in [0, {self.n})")
        return T.take(self.table, ids)


class SelfAttentionBlock:
    """Single-head masked self-attention with residual, then a residual ReLU feed-forward."""

    def __init__(self, params: Params, name: str, d: int, rng: np.random.Generator):
        self.d = d
        self.q = Linear(params, f"{name}.q", d, d, rng, bias=False)
        self.k = Linear(params, f"{name}.k", d, d, rng, bias=False)
        self.v = Linear(params, f"{name}.v", d, d, rng, bias=False)
        self.ffn = MLP(params, f"{name}.ffn", [d, d, d], rng, out_scale=0.5)

    def __call__(self, X: Tensor, mask: np.ndarray) -> Tensor:
        n, L, d = X.shape
        if L == 0:
            return X
        scores = T.matmul(self.q(X), T.transpose(self.k(X))) * (1.0 / math.sqrt(d))
        key_mask = np.broadcast_to(mask[:, None, :], (n, L, L))
        H = X + T.matmul(T.softmax(scores, axis=-1, mask=key_mask), self.v(X))
        return H + self.ffn(H)


@dataclass
class ModelConfig:
    variant: str = "gpsvi"
    d: int = 16
    decoder_hidden: list[int] = field(default_factory=lambda: [32])
    emb_std: float = 0.1
    scale_logits: bool = False
    separate_kv: bool = False
    query_with_context: bool = False
    backbone: str = "attn"
    use_flow: bool = True
    flow_layers: int = 2
    flow_hidden: int | None = None
    prior_hidden: int | None = None
    projection_mode: str = V.ORTHOGONAL
    sigma_min: float = 1e-8
    sigma_max: float = 1e3
    sigma_init: float = 1.0
    eps_g: float = V.EPS_G

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.backbone not in ("attn", "trans_lite"):
            raise ConfigError(f"backbone must be 'attn' or 'trans_lite', got {self.backbone!r}")
        if self.projection_mode not in V.PROJECTION_MODES:
            raise ConfigError(f"projection_mode must be one of {V.PROJECTION_MODES}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.variant == "gpsvi" and self.use_flow and self.flow_layers > 0 and self.d < 2:
            raise ConfigError("the flow needs d >= 2")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 < sigma_min <= sigma_max")
        if not self.sigma_init > 0:
            raise ConfigError("sigma_init must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ForwardOut:
    logits: Tensor
    v: Tensor
    z: Tensor
    attention: AttentionOutput | None = None
    posterior: V.PosteriorParams | None = None
    prior: V.GroupPrior | None = None
    kl: Tensor | None = None
    xi: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        return T._sigmoid_np(self.logits.values)


class CTRModel:
    """Embedding & network CTR model; ``cfg.variant`` selects the behavior encoder.

    Every variant shares parameter names for embeddings, encoder and decoder, so
    weights can be copied between a GPSVI model and its deterministic backbone.
    """

    def __init__(self, vocab: Vocab, cfg: ModelConfig, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg
        self.seed = seed
        self.params = Params()
        rng = np.random.default_rng(seed)
        d = cfg.d
        p = self.params
        self.item_emb = Embedding(p, "emb.item", vocab.n_items, d, rng, cfg.emb_std)
        self.ctx_emb = Embedding(p, "emb.context", vocab.n_contexts, d, rng, cfg.emb_std)
        self.group_embs = [Embedding(p, f"emb.group.{k}", n, d, rng, cfg.emb_std)
                           for k, n in enumerate(vocab.group_sizes)]
        n_fields = len(vocab.group_sizes)

        self.query_proj = Linear(p, "attn.query", 2 * d, d, rng) if cfg.query_with_context else None
        if cfg.separate_kv:
            self.key_proj = Linear(p, "attn.key", d, d, rng, bias=False)
            self.value_proj = Linear(p, "attn.value", d, d, rng, bias=False)
        else:
            self.key_proj = self.value_proj = None

        encoder = cfg.backbone if cfg.variant == "gpsvi" else cfg.variant
        self.encoder = encoder
        self.pool_mlp = MLP(p, "dnn.mlp", [d, d, d], rng) if encoder == "dnn" else None
        self.block = SelfAttentionBlock(p, "trans", d, rng) if encoder == "trans_lite" else None

        self.decoder = MLP(p, "decoder", [d * (3 + n_fields)] + list(cfg.decoder_hidden) + [1], rng)

        self.sigma_net = self.prior_net = self.flow = None
        if cfg.variant == "gpsvi":
            self.sigma_net = V.SigmaNetwork(p, d, rng, init_sigma=cfg.sigma_init)
            self.prior_net = V.GroupPriorNetwork(p, d * (n_fields + 1), cfg.prior_hidden or d, d, rng)
            if cfg.use_flow and cfg.flow_layers > 0:
                self.flow = FlowStack.build(p, d, cfg.flow_layers, cfg.flow_hidden, rng)

    @property
    def is_variational(self) -> bool:
        return self.cfg.variant == "gpsvi"

    # -- pieces -----------------------------------------------------------

    def group_embedding(self, group_ids) -> Tensor:
        group_ids = np.asarray(group_ids, dtype=np.int64)
        return T.concat([emb(group_ids[..., k]) for k, emb in enumerate(self.group_embs)], axis=-1)

    def group_prior(self, group_ids, item_ids) -> V.GroupPrior:
        if self.prior_net is None:
            raise ConfigError("group prior exists only for the gpsvi variant")
        g = self.prior_net(self.group_embedding(group_ids), self.item_emb(item_ids))
        return V.group_prior(g, self.cfg.eps_g)

    def encode(self, batch: Batch, behaviors_mask: np.ndarray | None = None):
        """Behavior representation v plus the attention output (None for sum pooling)."""
        mask = batch.mask if behaviors_mask is None else behaviors_mask
        n, L = batch.behaviors.shape
        beh = self.item_emb(batch.behaviors.reshape(-1)).reshape(n, L, self.cfg.d)
        if self.encoder == "dnn":
            return self.pool_mlp(sum_pool(beh, mask)), None
        if self.block is not None:
            beh = self.block(beh, mask)
        q = self.item_emb(batch.item)
        if self.query_proj is not None:
            q = self.query_proj(T.concat([q, self.ctx_emb(batch.context)], axis=-1))
        K = self.key_proj(beh) if self.key_proj is not None else beh
        Vals = self.value_proj(beh) if self.value_proj is not None else beh
        att = target_attention(q, K, Vals, mask, scale=self.cfg.scale_logits)
        return att.v, att

    def side_features(self, batch: Batch) -> list[Tensor]:
        return [self.item_emb(batch.item), self.ctx_emb(batch.context), self.group_embedding(batch.group)]

    def decode(self, z: Tensor, side: list[Tensor]) -> Tensor:
        return self.decoder(T.concat([z] + side, axis=-1)).reshape(z.shape[0])

    # -- full pass --------------------------------------------------------

    def forward(self, batch: Batch, sample: bool = False, xi: np.ndarray | None = None,
                rng: np.random.Generator | None = None, behaviors_mask: np.ndarray | None = None,
                with_kl: bool = False) -> ForwardOut:
        """Score a batch.

        ``sample`` draws z through the group-prior sampler (noise from ``xi`` or
        ``rng``); otherwise z is the posterior mean.  The flow, when present, is
        applied in both cases.
        """
        v, att = self.encode(batch, behaviors_mask)
        out = ForwardOut(logits=None, v=v, z=v, attention=att)
        if self.is_variational:
            cfg = self.cfg
            post = V.posterior_params(v, batch.lengths, self.sigma_net,
                                      math.log(cfg.sigma_min), math.log(cfg.sigma_max))
            z = v
            need_prior = sample or with_kl
            prior = self.group_prior(batch.group, batch.item) if need_prior else None
            if sample:
                if xi is None:
                    rng = rng if rng is not None else np.random.default_rng(0)
                    xi = rng.standard_normal(v.shape)
                z = V.sample_latent(post, prior, xi, cfg.projection_mode).z
            if with_kl:
                out.kl = V.kl_projected(post, prior)
            if self.flow is not None:
                z, _ = flow_forward(z, self.flow)
            out.posterior, out.prior, out.xi, out.z = post, prior, xi, z
        out.logits = self.decode(out.z, self.side_features(batch))
        return out

    def predict(self, batch: Batch, mc_samples: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
        with T.no_grad():
            if mc_samples and self.is_variational:
                rng = rng if rng is not None else np.random.default_rng(0)
                return np.mean([self.forward(batch, sample=True, rng=rng).probs for _ in range(mc_samples)], axis=0)
            return self.forward(batch).probs


def predict_ctr(decoder: MLP, z, side_features) -> np.ndarray | float:
    """sigmoid(decoder([z, side...])) for one example or a batch."""
    z = T.as_tensor(z)
    single = z.ndim == 1
    parts = [z] + [T.as_tensor(s) for s in side_features]
    if single:
        parts = [t.reshape(1, -1) for t in parts]
    with T.no_grad():
        logit = decoder(T.concat(parts, axis=-1)).values.reshape(-1)
    p = T._sigmoid_np(logit)
    return float(p[0]) if single else p
