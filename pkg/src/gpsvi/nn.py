"""Parameter storage, small layers, Adam, and the JSON checkpoint format."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParseError
from .tensor import Tensor


class Params:
    """Named, insertion-ordered collection of trainable leaf tensors."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._store:
            raise KeyError(f"duplicate parameter {name!r}")
        t = T.parameter(values)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __iter__(self) -> Iterator[str]:
        return iter(self._store)

    def __len__(self):
        return len(self._store)

    def items(self):
        return self._store.items()

    def tensors(self) -> list[Tensor]:
        return list(self._store.values())

    def zero_grad(self):
        for t in self._store.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._store.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self._store.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        missing = [k for k in self._store if k not in state]
        extra = [k for k in state if k not in self._store]
        if strict and (missing or extra):
            raise ConfigError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for k, t in self._store.items():
            if k in state:
                arr = np.asarray(state[k], dtype=np.float64)
                if arr.shape != t.shape:
                    raise ConfigError(f"parameter {k!r}: shape {arr.shape} != expected {t.shape}")
                t.values = arr.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float = 1.0):
        self.W = params.add(f"{name}.W", glorot(rng, n_in, n_out) * scale)
        self.b = params.add(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self(x.reshape(1, -1)).reshape(-1)
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, params: Params, name: str, sizes: list[int], rng: np.random.Generator,
                 out_scale: float = 1.0):
        self.layers = [
            Linear(params, f"{name}.{i}", a, b, rng, scale=out_scale if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# JSON with 17-significant-digit floats


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite float {x!r} cannot be serialized")
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def dumps(obj, indent: int | None = 2, _level: int = 0) -> str:
    """JSON encoder writing floats with 17 significant digits and keeping key order.

    NaN is written as ``null``.
    """
    pad = "" if indent is None else "\n" + " " * (indent * (_level + 1))
    end = "" if indent is None else "\n" + " " * (indent * _level)
    sep = "," if indent is None else ","
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return "null" if math.isnan(x) else format_float(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        body = sep.join(f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items())
        return "{" + body + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v, indent) for v in obj) + "]"
        body = sep.join(f"{pad}{dumps(v, indent, _level + 1)}" for v in obj)
        return "[" + body + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def atomic_write(path: str | os.PathLike, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str | os.PathLike):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg} at line {exc.lineno}, column {exc.colno}",
                         line=exc.lineno, column=exc.colno) from None


def save_checkpoint(path, params: Params, meta: dict | None = None):
    """Write ``{name: {shape, values}}``; an optional ``__meta__`` entry carries the model config."""
    doc = {}
    if meta is not None:
        doc["__meta__"] = meta
    for name, t in params.items():
        doc[name] = {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
    atomic_write(path, dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    doc = read_json(path)
    meta = doc.pop("__meta__", None)
    state = {}
    for name, entry in doc.items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != math.prod(shape):
            raise ParseError(f"{path}: parameter {name!r} has {values.size} values for shape {shape}")
        state[name] = values.reshape(shape)
    return state, meta
