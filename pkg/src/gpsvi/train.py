"""Run configuration, loss assembly, seeded training, and segment-wise evaluation."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from . import variational as V
from .data import (Batch, Dataset, Segment, SynthConfig, Vocab, batch_iter, generate_synthetic,
                   load_jsonl, make_batch, split_head_tail, split_train_test)
from .errors import ConfigError, NaNLossError
from .metrics import safe_auc
from .models import VARIANTS, CTRModel, ModelConfig
from .nn import Adam, atomic_write, dumps, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

SEED_ENV = "GPSVI_SEED"


@dataclass
class Seeds:
    init: int = 0
    data: int = 0
    noise: int = 0


@dataclass
class DataSource:
    """Either a synthetic population (``synthetic`` + ``seed``) or JSONL paths."""

    synthetic: dict | None = None
    synthetic_seed: int | None = None
    train_path: str | None = None
    test_path: str | None = None
    test_fraction: float = 0.2
    max_seq_len: int | None = None


@dataclass
class RunConfig:
    variant: str = "gpsvi"
    use_flow: bool = True
    use_monotonic_reg: bool = True
    projection_mode: str = V.ORTHOGONAL
    d: int = 16
    decoder_hidden: list[int] = field(default_factory=lambda: [32])
    lr: float = 1e-3
    beta: float = 1.0
    beta_warmup: bool = False
    lambda_m: float = 1e-3
    batch_size: int = 128
    epochs: int = 3
    flow_layers: int = 2
    flow_hidden: int | None = None
    prior_hidden: int | None = None
    sigma_min: float = 1e-8
    sigma_max: float = 1e3
    sigma_init: float = 1.0
    eps_g: float = V.EPS_G
    emb_std: float = 0.1
    scale_logits: bool = False
    separate_kv: bool = False
    query_with_context: bool = False
    backbone: str = "attn"
    eval_mc_samples: int = 0
    head_quantile: float = 0.25
    segment_source: str = "eval"
    repeats: int = 1
    seeds: Seeds = field(default_factory=Seeds)
    data: DataSource = field(default_factory=DataSource)

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        if isinstance(self.data, dict):
            self.data = DataSource(**self.data)
        self.decoder_hidden = list(self.decoder_hidden)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.repeats < 1:
            raise ConfigError("epochs must be >= 0 and repeats >= 1")
        if self.lr < 0 or self.beta < 0 or self.lambda_m < 0:
            raise ConfigError("lr, beta and lambda_m must be non-negative")
        if self.segment_source not in ("eval", "train"):
            raise ConfigError("segment_source must be 'eval' or 'train'")
        if not 0.0 < self.head_quantile < 1.0:
            raise ConfigError("head_quantile must lie in (0, 1)")
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, d=self.d, decoder_hidden=list(self.decoder_hidden), emb_std=self.emb_std,
            scale_logits=self.scale_logits, separate_kv=self.separate_kv,
            query_with_context=self.query_with_context, backbone=self.backbone, use_flow=self.use_flow,
            flow_layers=self.flow_layers, flow_hidden=self.flow_hidden, prior_hidden=self.prior_hidden,
            projection_mode=self.projection_mode, sigma_min=self.sigma_min, sigma_max=self.sigma_max,
            sigma_init=self.sigma_init,
            eps_g=self.eps_g,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_env_seed(self) -> "RunConfig":
        raw = os.environ.get(SEED_ENV)
        if not raw:
            return self
        try:
            s = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        data = replace(self.data, synthetic_seed=s) if self.data.synthetic is not None else self.data
        return replace(self, seeds=Seeds(s, s, s), data=data)


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossParts:
    total: T.Tensor
    bce: float
    kl: float
    reg: float
    beta: float
    lambda_m: float


def assemble_loss(batch: Batch, model: CTRModel, cfg: RunConfig, rng: np.random.Generator,
                  beta: float | None = None, xi: np.ndarray | None = None) -> LossParts:
    """mean BCE + beta * mean KL + lambda_m * monotone penalty (last two only for gpsvi)."""
    beta = cfg.beta if beta is None else beta
    if not model.is_variational:
        out = model.forward(batch)
        bce = T.mean(T.bce_with_logits(out.logits, batch.label))
        return LossParts(bce, bce.item(), 0.0, 0.0, 0.0, 0.0)

    out = model.forward(batch, sample=True, xi=xi, rng=rng, with_kl=True)
    bce = T.mean(T.bce_with_logits(out.logits, batch.label))
    kl = T.mean(out.kl)
    total = bce + beta * kl
    reg_value, lam = 0.0, 0.0
    if cfg.use_monotonic_reg and cfg.lambda_m > 0:
        reg = V.monotonic_regularizer(out.posterior.sigma, batch.lengths, rng)
        total = total + cfg.lambda_m * reg
        reg_value, lam = reg.item(), cfg.lambda_m
    return LossParts(total, bce.item(), kl.item(), reg_value, beta, lam)


# ---------------------------------------------------------------------------
# Data resolution


def resolve_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    src = cfg.data
    if src.synthetic is not None:
        synth = SynthConfig.from_json(src.synthetic)
        seed = cfg.seeds.data if src.synthetic_seed is None else src.synthetic_seed
        full = generate_synthetic(synth, seed)
        return split_train_test(full, src.test_fraction, seed)
    if src.train_path is None:
        raise ConfigError("data needs either 'synthetic' or 'train_path'")
    train_ds = load_jsonl(src.train_path, max_seq_len=src.max_seq_len)
    if src.test_path is None:
        return split_train_test(train_ds, src.test_fraction, cfg.seeds.data)
    test_ds = load_jsonl(src.test_path, max_seq_len=src.max_seq_len)
    vocab = merge_vocab(train_ds.vocab, test_ds.vocab)
    train_ds.vocab = test_ds.vocab = vocab
    return train_ds, test_ds


def merge_vocab(a: Vocab, b: Vocab) -> Vocab:
    if len(a.group_sizes) != len(b.group_sizes):
        raise ConfigError("train and test disagree on the number of group fields")
    return Vocab(max(a.n_items, b.n_items), max(a.n_contexts, b.n_contexts),
                 tuple(max(x, y) for x, y in zip(a.group_sizes, b.group_sizes)),
                 max(a.max_seq_len, b.max_seq_len))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainRun:
    model: CTRModel
    history: list[dict]
    warnings: dict


def train_model(cfg: RunConfig, train_ds: Dataset, repeat: int = 0, vocab: Vocab | None = None) -> TrainRun:
    """Seeded minibatch Adam; returns the trained model and per-epoch loss history."""
    vocab = vocab or train_ds.vocab
    model = CTRModel(vocab, cfg.model_config(), seed=cfg.seeds.init + repeat)
    opt = Adam(model.params, lr=cfg.lr)
    noise_rng = np.random.default_rng([cfg.seeds.noise, repeat])
    n_batches = max(1, math.ceil(len(train_ds) / cfg.batch_size))
    V.warning_counts.clear()
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"loss": 0.0, "bce": 0.0, "kl": 0.0, "reg": 0.0}
        count = 0
        shuffle = int(np.random.default_rng([cfg.seeds.data, repeat, epoch]).integers(2**31))
        for bi, batch in enumerate(batch_iter(train_ds, cfg.batch_size, shuffle)):
            beta = cfg.beta * min(1.0, (step + 1) / n_batches) if cfg.beta_warmup else cfg.beta
            model.params.zero_grad()
            with T.Tape():
                parts = assemble_loss(batch, model, cfg, noise_rng, beta=beta)
                total = parts.total.item()
                if not math.isfinite(total):
                    raise NaNLossError(
                        f"non-finite loss at epoch {epoch}, batch {bi}", batch_index=bi,
                        dump={"epoch": epoch, "batch": bi, "index": batch.index.tolist(),
                              "bce": parts.bce, "kl": parts.kl, "reg": parts.reg})
                T.backward(parts.total)
            opt.step()
            step += 1
            count += 1
            sums["loss"] += total
            sums["bce"] += parts.bce
            sums["kl"] += parts.kl
            sums["reg"] += parts.reg
        history.append({"epoch": epoch, **{k: v / max(count, 1) for k, v in sums.items()}})
    return TrainRun(model, history, dict(sorted(V.warning_counts.items())))


# ---------------------------------------------------------------------------
# Evaluation


def canonical_order(ds: Dataset) -> np.ndarray:
    """Record order that does not depend on how the dataset was shuffled."""
    keys = [(r.user_id, r.item_id, r.context_id, r.label, r.group, r.behaviors) for r in ds.records]
    return np.asarray(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def score(model: CTRModel, ds: Dataset, batch_size: int = 512, mc_samples: int = 0, seed: int = 0) -> np.ndarray:
    """Click probabilities in dataset order; batches are formed in canonical order."""
    arrs = ds.arrays()
    order = canonical_order(ds)
    out = np.empty(arrs.n)
    rng = np.random.default_rng(seed)
    for start in range(0, arrs.n, batch_size):
        idx = order[start:start + batch_size]
        out[idx] = model.predict(make_batch(arrs, idx), mc_samples=mc_samples, rng=rng)
    return out


def segment_aucs(scores: np.ndarray, ds: Dataset, segments: dict[int, Segment]) -> dict[str, float | None]:
    arrs = ds.arrays()
    seg = np.array([segments.get(int(u)) == Segment.HEAD for u in arrs.user])
    known = np.array([int(u) in segments for u in arrs.user])
    return {
        "all": safe_auc(scores, arrs.label),
        "head": safe_auc(scores[seg & known], arrs.label[seg & known]) if (seg & known).any() else None,
        "tail": safe_auc(scores[~seg & known], arrs.label[~seg & known]) if (~seg & known).any() else None,
    }


def evaluate(model: CTRModel, ds: Dataset, segments: dict[int, Segment], mc_samples: int = 0) -> dict:
    return segment_aucs(score(model, ds, mc_samples=mc_samples), ds, segments)


def _summary(values: list[float | None]) -> dict:
    present = [v for v in values if v is not None]
    return {
        "mean": float(np.mean(present)) if present else None,
        "std": float(np.std(present)) if present else None,
        "runs": values,
    }


def summarize(per_repeat: list[dict]) -> dict:
    return {k: _summary([r[k] for r in per_repeat]) for k in ("all", "head", "tail")}


def segment_info(segments: dict[int, Segment], source: str, q: float) -> dict:
    n_head = sum(1 for s in segments.values() if s == Segment.HEAD)
    return {"source": source, "head_quantile": q, "n_head_users": n_head, "n_tail_users": len(segments) - n_head}


def model_meta(model: CTRModel) -> dict:
    return {"model": model.cfg.to_json(), "vocab": model.vocab.to_json(), "seed": model.seed}


def train(cfg: RunConfig, out_dir: str | os.PathLike | None = None) -> dict:
    """Train ``cfg.repeats`` models, evaluate each on the held-out split, write artifacts.

    Returns the metrics document (also written to ``metrics.json``).
    """
    train_ds, test_ds = resolve_data(cfg)
    seg_ds = test_ds if cfg.segment_source == "eval" else train_ds
    segments = split_head_tail(seg_ds, cfg.head_quantile)
    per_repeat, histories, warnings = [], [], []
    models = []
    for r in range(cfg.repeats):
        run = train_model(cfg, train_ds, repeat=r)
        per_repeat.append(evaluate(run.model, test_ds, segments, cfg.eval_mc_samples))
        histories.append(run.history)
        warnings.append(run.warnings)
        models.append(run.model)
    metrics = {
        "variant": cfg.variant,
        "repeats": cfg.repeats,
        "auc": summarize(per_repeat),
        "segments": segment_info(segments, cfg.segment_source, cfg.head_quantile),
        "data": {"train_hash": train_ds.provenance.get("hash"), "test_hash": test_ds.provenance.get("hash"),
                 "n_train": len(train_ds), "n_test": len(test_ds)},
        "history": histories,
        "warnings": warnings,
        "config": cfg.to_json(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "config.json", dumps(cfg.to_json()) + "\n")
        for r, m in enumerate(models):
            name = "checkpoint.json" if r == 0 else f"checkpoint_{r}.json"
            save_checkpoint(out / name, m.params, model_meta(m))
        atomic_write(out / "metrics.json", dumps(metrics) + "\n")
    metrics["_models"] = models
    return metrics


def load_model(path) -> CTRModel:
    state, meta = load_checkpoint(path)
    if meta is None:
        raise ConfigError(f"{path}: checkpoint lacks the __meta__ model description")
    model = CTRModel(Vocab.from_json(meta["vocab"]), ModelConfig.from_json(meta["model"]), seed=meta.get("seed", 0))
    model.params.load_state(state)
    return model


def evaluate_checkpoint(path, ds: Dataset, head_quantile: float = 0.25, mc_samples: int = 0) -> dict:
    return evaluate_model(load_model(path), ds, head_quantile, mc_samples)


def evaluate_model(model: CTRModel, ds: Dataset, head_quantile: float = 0.25, mc_samples: int = 0) -> dict:
    segments = split_head_tail(ds, head_quantile)
    return {
        "variant": model.cfg.variant,
        "auc": evaluate(model, ds, segments, mc_samples),
        "segments": segment_info(segments, "eval", head_quantile),
        "data": {"hash": ds.provenance.get("hash"), "n": len(ds)},
    }
