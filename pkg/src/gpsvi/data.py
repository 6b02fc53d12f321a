"""Impression records, synthetic long-tail populations, JSONL ingest, head/tail split, batching."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, VocabError

DEFAULT_MAX_SEQ_LEN = 500


@dataclass(frozen=True)
class ExampleRecord:
    user_id: int
    group: tuple[int, ...]
    item_id: int
    context_id: int
    behaviors: tuple[int, ...]
    label: int

    @property
    def length(self) -> int:
        return len(self.behaviors)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "group": list(self.group),
            "item_id": self.item_id,
            "context_id": self.context_id,
            "behaviors": list(self.behaviors),
            "label": self.label,
        }


@dataclass(frozen=True)
class Vocab:
    n_items: int
    n_contexts: int
    group_sizes: tuple[int, ...]
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN

    def __post_init__(self):
        if self.n_items < 1 or self.n_contexts < 1 or not self.group_sizes or min(self.group_sizes) < 1:
            raise ConfigError(f"vocabulary sizes must be positive: {self}")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["group_sizes"] = list(self.group_sizes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(int(d["n_items"]), int(d["n_contexts"]), tuple(int(x) for x in d["group_sizes"]),
                   int(d.get("max_seq_len", DEFAULT_MAX_SEQ_LEN)))

    def check(self, rec: ExampleRecord, where: str = ""):
        if len(rec.group) != len(self.group_sizes):
            raise VocabError(f"{where}group has {len(rec.group)} fields, vocab declares {len(self.group_sizes)}")
        for k, (g, n) in enumerate(zip(rec.group, self.group_sizes)):
            if not 0 <= g < n:
                raise VocabError(f"{where}group field {k} id {g} outside [0, {n})")
        if not 0 <= rec.item_id < self.n_items:
            raise VocabError(f"{where}item_id {rec.item_id} outside [0, {self.n_items})")
        if not 0 <= rec.context_id < self.n_contexts:
            raise VocabError(f"{where}context_id {rec.context_id} outside [0, {self.n_contexts})")
        for b in rec.behaviors:
            if not 0 <= b < self.n_items:
                raise VocabError(f"{where}behavior item {b} outside [0, {self.n_items})")
        if len(rec.behaviors) > self.max_seq_len:
            raise VocabError(f"{where}behavior length {len(rec.behaviors)} exceeds max_seq_len {self.max_seq_len}")


@dataclass
class Dataset:
    records: list[ExampleRecord]
    vocab: Vocab
    provenance: dict = field(default_factory=dict)
    # Per-record side arrays from the generator (e.g. its group mixing weight).
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.vocab.to_json(), sort_keys=True, separators=(",", ":")).encode())
        for r in self.records:
            h.update(b"\n")
            h.update(json.dumps(r.to_json(), separators=(",", ":")).encode())
        return h.hexdigest()

    def subset(self, indices: Sequence[int], tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        prov = dict(self.provenance)
        if tag:
            prov["subset"] = tag
        sub = Dataset([self.records[i] for i in idx], self.vocab, prov,
                      {k: v[idx] for k, v in self.extras.items()})
        sub.provenance["hash"] = sub.content_hash()
        return sub

    def arrays(self) -> "DatasetArrays":
        cached = getattr(self, "_arrays", None)
        if cached is None or cached.n != len(self.records):
            cached = DatasetArrays.from_records(self.records, len(self.vocab.group_sizes))
            self._arrays = cached
        return cached


@dataclass
class DatasetArrays:
    n: int
    user: np.ndarray
    group: np.ndarray
    item: np.ndarray
    context: np.ndarray
    behaviors: np.ndarray
    lengths: np.ndarray
    label: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[ExampleRecord], n_fields: int) -> "DatasetArrays":
        n = len(records)
        lengths = np.array([len(r.behaviors) for r in records], dtype=np.int64)
        width = int(lengths.max()) if n else 0
        beh = np.zeros((n, width), dtype=np.int64)
        for i, r in enumerate(records):
            if r.behaviors:
                beh[i, : len(r.behaviors)] = r.behaviors
        return cls(
            n=n,
            user=np.array([r.user_id for r in records], dtype=np.int64),
            group=np.array([r.group for r in records], dtype=np.int64).reshape(n, n_fields),
            item=np.array([r.item_id for r in records], dtype=np.int64),
            context=np.array([r.context_id for r in records], dtype=np.int64),
            behaviors=beh,
            lengths=lengths,
            label=np.array([r.label for r in records], dtype=np.float64),
        )


@dataclass
class Batch:
    index: np.ndarray
    user: np.ndarray
    group: np.ndarray
    item: np.ndarray
    context: np.ndarray
    behaviors: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.index)


def make_batch(arrs: DatasetArrays, index: np.ndarray) -> Batch:
    lengths = arrs.lengths[index]
    width = int(lengths.max()) if len(index) else 0
    beh = arrs.behaviors[index, :width]
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)
    return Batch(index, arrs.user[index], arrs.group[index], arrs.item[index], arrs.context[index],
                 beh, mask, lengths, arrs.label[index])


def batch_iter(ds: Dataset, batch_size: int, shuffle_seed: int | None = 0) -> Iterator[Batch]:
    """Yield padded batches in a seeded permutation (``shuffle_seed=None`` keeps record order)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    arrs = ds.arrays()
    order = np.arange(arrs.n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(arrs.n)
    for start in range(0, arrs.n, batch_size):
        yield make_batch(arrs, order[start:start + batch_size])


# ---------------------------------------------------------------------------
# Head / tail segmentation


class Segment(str, enum.Enum):
    HEAD = "head"
    TAIL = "tail"


def interaction_counts(ds: Dataset) -> dict[int, int]:
    counts: dict[int, int] = {}
    for r in ds.records:
        l = len(r.behaviors)
        if l > counts.get(r.user_id, -1):
            counts[r.user_id] = l
    return counts


def split_head_tail(ds: Dataset, head_quantile: float = 0.25) -> dict[int, Segment]:
    """Top ``ceil(q * n_users)`` users by longest observed sequence are head.

    Ties break by ascending user id.
    """
    if not 0.0 < head_quantile < 1.0:
        raise ConfigError(f"head_quantile must lie in (0, 1), got {head_quantile}")
    counts = interaction_counts(ds)
    if not counts:
        raise EmptyDatasetError("cannot segment an empty dataset")
    ranked = sorted(counts, key=lambda u: (-counts[u], u))
    n_head = math.ceil(head_quantile * len(ranked))
    return {u: (Segment.HEAD if k < n_head else Segment.TAIL) for k, u in enumerate(ranked)}


# ---------------------------------------------------------------------------
# JSONL ingest


_KEYS = ("user_id", "group", "item_id", "context_id", "behaviors", "label")


def _parse_record(obj, lineno: int, max_seq_len: int) -> ExampleRecord:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected a JSON object", line=lineno)
    missing = [k for k in _KEYS if k not in obj]
    if missing:
        raise ParseError(f"line {lineno}: missing field(s) {missing}", line=lineno)

    def as_int(v, name):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ParseError(f"line {lineno}: field {name!r} must be an integer, got {v!r}", line=lineno)
        return v

    group = obj["group"]
    behaviors = obj["behaviors"]
    if not isinstance(group, list) or not isinstance(behaviors, list):
        raise ParseError(f"line {lineno}: 'group' and 'behaviors' must be arrays", line=lineno)
    label = as_int(obj["label"], "label")
    if label not in (0, 1):
        raise ParseError(f"line {lineno}: label must be 0 or 1, got {label}", line=lineno)
    beh = tuple(as_int(b, "behaviors") for b in behaviors)
    if len(beh) > max_seq_len:
        beh = beh[-max_seq_len:]
    return ExampleRecord(
        user_id=as_int(obj["user_id"], "user_id"),
        group=tuple(as_int(g, "group") for g in group),
        item_id=as_int(obj["item_id"], "item_id"),
        context_id=as_int(obj["context_id"], "context_id"),
        behaviors=beh,
        label=label,
    )


def load_jsonl(path, vocab: Vocab | None = None, max_seq_len: int | None = None) -> Dataset:
    """Read one record per line; behaviors keep their most recent ``max_seq_len`` entries.

    Without a declared ``vocab`` the sizes are inferred from the data.
    """
    path = Path(path)
    if max_seq_len is None:
        max_seq_len = vocab.max_seq_len if vocab is not None else DEFAULT_MAX_SEQ_LEN
    records: list[ExampleRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}, column {exc.colno}: {exc.msg}",
                                 line=lineno, column=exc.colno) from None
            rec = _parse_record(obj, lineno, max_seq_len)
            if vocab is not None:
                vocab.check(rec, where=f"{path}: line {lineno}: ")
            records.append(rec)
    if vocab is None:
        vocab = infer_vocab(records, max_seq_len)
    ds = Dataset(records, vocab, {"kind": "jsonl", "source": str(path)})
    ds.provenance["hash"] = ds.content_hash()
    return ds


def infer_vocab(records: Sequence[ExampleRecord], max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> Vocab:
    if not records:
        return Vocab(1, 1, (1,), max_seq_len)
    n_fields = len(records[0].group)
    if any(len(r.group) != n_fields for r in records):
        raise VocabError("records disagree on the number of group fields")
    if any(min(r.group, default=0) < 0 or r.item_id < 0 or r.context_id < 0 or min(r.behaviors, default=0) < 0
           for r in records):
        raise VocabError("negative ids are not allowed")
    n_items = 1 + max(max(r.item_id, max(r.behaviors, default=0)) for r in records)
    n_ctx = 1 + max(r.context_id for r in records)
    sizes = tuple(1 + max(r.group[k] for r in records) for k in range(n_fields)) if n_fields else (1,)
    return Vocab(n_items, n_ctx, sizes, max_seq_len)


def write_jsonl(ds: Dataset, path):
    from .nn import atomic_write

    lines = [json.dumps(r.to_json(), separators=(",", ":")) for r in ds.records]
    atomic_write(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# Synthetic long-tail populations


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic CTR population.

    Labels follow ``sigmoid(bias + ctx + hist_w * <taste, item> + group_w * <group pref, item>)``
    where ``group_w = group_strength * l0 / (l0 + l_u)`` grows as the history shrinks.
    """

    n_users: int = 10000
    n_items: int = 400
    n_contexts: int = 4
    n_groups: int = 32
    group_sizes: tuple[int, ...] = (4, 2, 4)
    zipf_exponent: float = 1.2
    max_seq_len: int = 100
    impressions_per_user: int = 4
    latent_dim: int = 8
    group_strength: float = 3.0
    history_strength: float = 3.0
    length_scale: float = 8.0
    group_taste_share: float = 0.5
    behavior_temperature: float = 2.0
    context_effect: float = 0.3
    label_bias: float = -0.5
    label_noise: float = 0.05

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1 or self.n_contexts < 1 or self.n_groups < 1:
            raise ConfigError("n_users, n_items, n_contexts and n_groups must be positive")
        if self.zipf_exponent <= 0.0:
            raise ConfigError(f"zipf_exponent must be positive, got {self.zipf_exponent}")
        if math.prod(self.group_sizes) != self.n_groups:
            raise ConfigError(f"group_sizes {self.group_sizes} must multiply to n_groups={self.n_groups}")
        if self.max_seq_len < 1 or self.impressions_per_user < 1 or self.latent_dim < 1:
            raise ConfigError("max_seq_len, impressions_per_user and latent_dim must be >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if self.group_strength < 0 or self.history_strength < 0 or self.length_scale <= 0:
            raise ConfigError("strengths must be >= 0 and length_scale > 0")
        if not 0.0 <= self.group_taste_share <= 1.0:
            raise ConfigError("group_taste_share must lie in [0, 1]")

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig field(s): {sorted(unknown)}")
        kw = dict(d)
        if "group_sizes" in kw:
            kw["group_sizes"] = tuple(kw["group_sizes"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        d = asdict(self)
        d["group_sizes"] = list(self.group_sizes)
        return d

    def vocab(self) -> Vocab:
        return Vocab(self.n_items, self.n_contexts, tuple(self.group_sizes), self.max_seq_len)


def group_weight(lengths: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Share of the label logit carried by the group term, per behavior length."""
    return cfg.length_scale / (cfg.length_scale + np.asarray(lengths, dtype=np.float64))


def truncated_zipf_pmf(exponent: float, max_len: int) -> np.ndarray:
    """P(l) proportional to (l + 1) ** -exponent on l = 0..max_len."""
    w = np.arange(1, max_len + 2, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    r = cfg.latent_dim
    item_vecs = rng.normal(size=(cfg.n_items, r)) / math.sqrt(r)
    ctx_bias = rng.normal(size=cfg.n_contexts) * cfg.context_effect

    lengths = rng.choice(cfg.max_seq_len + 1, size=cfg.n_users, p=truncated_zipf_pmf(cfg.zipf_exponent, cfg.max_seq_len))

    # group id -> tuple of categorical fields, mixed radix over group_sizes
    radices = np.array(cfg.group_sizes)
    group_fields = np.zeros((cfg.n_groups, len(radices)), dtype=np.int64)
    rem = np.arange(cfg.n_groups)
    for k in range(len(radices) - 1, -1, -1):
        group_fields[:, k] = rem % radices[k]
        rem = rem // radices[k]
    # a group's preference is the sum of per-field preference vectors
    field_pref = [rng.normal(size=(n, r)) / math.sqrt(len(radices)) for n in cfg.group_sizes]
    group_pref = sum(field_pref[k][group_fields[:, k]] for k in range(len(radices)))

    user_group = rng.integers(cfg.n_groups, size=cfg.n_users)
    personal = rng.normal(size=(cfg.n_users, r))
    share = cfg.group_taste_share
    taste = share * group_pref[user_group] + math.sqrt(1.0 - share * share) * personal

    hist_w = 1.0 - group_weight(lengths, cfg)
    grp_w = group_weight(lengths, cfg)

    records: list[ExampleRecord] = []
    weights: list[float] = []
    true_probs: list[float] = []
    k_imp = cfg.impressions_per_user
    for u in range(cfg.n_users):
        l = int(lengths[u])
        if l:
            logits = cfg.behavior_temperature * (item_vecs @ taste[u])
            p = np.exp(logits - logits.max())
            p /= p.sum()
            behaviors = tuple(int(b) for b in rng.choice(cfg.n_items, size=l, p=p))
        else:
            behaviors = ()
        targets = rng.integers(cfg.n_items, size=k_imp)
        contexts = rng.integers(cfg.n_contexts, size=k_imp)
        g = user_group[u]
        aff_hist = item_vecs[targets] @ taste[u]
        aff_group = item_vecs[targets] @ group_pref[g]
        logit = (cfg.label_bias + ctx_bias[contexts]
                 + cfg.history_strength * hist_w[u] * aff_hist
                 + cfg.group_strength * grp_w[u] * aff_group)
        prob = 1.0 / (1.0 + np.exp(-logit))
        labels = (rng.random(k_imp) < prob).astype(int)
        flips = rng.random(k_imp) < cfg.label_noise
        labels = np.where(flips, 1 - labels, labels)
        gf = tuple(int(x) for x in group_fields[g])
        for j in range(k_imp):
            records.append(ExampleRecord(u, gf, int(targets[j]), int(contexts[j]), behaviors, int(labels[j])))
            w_h, w_g = cfg.history_strength * hist_w[u], cfg.group_strength * grp_w[u]
            weights.append(w_g / (w_h + w_g) if w_h + w_g > 0 else 0.0)
            true_probs.append(float(prob[j]))

    ds = Dataset(records, cfg.vocab(), {"kind": "synthetic", "seed": int(seed), "config": cfg.to_json()},
                 {"group_share": np.asarray(weights), "true_prob": np.asarray(true_probs)})
    ds.provenance["hash"] = ds.content_hash()
    return ds


def split_train_test(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded split by user so no user appears on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    users = sorted({r.user_id for r in ds.records})
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(test_fraction * len(users))))
    test_users = set(np.asarray(users)[rng.permutation(len(users))[:n_test]].tolist())
    test_idx = [i for i, r in enumerate(ds.records) if r.user_id in test_users]
    train_idx = [i for i, r in enumerate(ds.records) if r.user_id not in test_users]
    return ds.subset(train_idx, "train"), ds.subset(test_idx, "test")
