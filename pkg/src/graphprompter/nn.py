"""Named parameters, layer helpers, AdamW and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GPCK"
    4       4     uint32 header length H
    8       H     UTF-8 JSON header
    8+H     ...   tensor payloads, '<f8' C-order, in header["tensors"] order

The JSON header holds ``format_version``, ``embedding_dim``,
``num_relations``, ``rng_seed``, ``config`` (model hyperparameters),
``tensors`` (list of ``{"name", "shape"}``) and ``extra`` (free-form,
used by the trainer for step count and RNG state).  Optimizer moments are
stored as ordinary tensors named ``adamw.m/<param>`` and ``adamw.v/<param>``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor

FORMAT_VERSION = 1
MAGIC = b"GPCK"


class ModelParams:
    """Ordered, uniquely named parameter tensors with fixed shapes."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def copy(self) -> "ModelParams":
        return ModelParams(self.numpy())

    def assign(self, name: str, value: np.ndarray) -> None:
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            raise ValueError(f"shape change for {name!r}: {t.shape} -> {value.shape}")
        t.data = value

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes; equal iff bit-identical."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_mlp(params: ModelParams, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Register weights ``{prefix}.W{i}``/``{prefix}.b{i}`` for a dense stack."""
    for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}.W{i}", uniform_init(rng, fin, (fin, fout)))
        params.add(f"{prefix}.b{i}", np.zeros(fout))


def mlp(params: ModelParams, prefix: str, x: Tensor, layers: int = 2) -> Tensor:
    """ReLU between layers, no activation on the output."""
    h = x
    for i in range(layers):
        h = ag.add_bias(ag.matmul(h, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < layers - 1:
            h = ag.relu(h)
    return h


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def init_state(self, params: ModelParams) -> AdamWState:
        return AdamWState(
            m={n: np.zeros_like(params[n].data) for n in params},
            v={n: np.zeros_like(params[n].data) for n in params},
        )

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray],
             state: AdamWState) -> AdamWState:
        """Decoupled weight decay, then a bias-corrected Adam update (in place)."""
        for name in params:
            if name not in grads:
                raise KeyError(f"missing gradient for parameter {name!r}")
        extra = set(grads) - set(params.names())
        if extra:
            raise KeyError(f"gradient for unknown parameter(s) {sorted(extra)}")
        state.step += 1
        t = state.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m = state.m[name] = self.beta1 * state.m[name] + (1 - self.beta1) * g
            v = state.v[name] = self.beta2 * state.v[name] + (1 - self.beta2) * g * g
            new = p.data * (1.0 - self.lr * self.weight_decay)
            new = new - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = new
        return state


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path, params: ModelParams, *, embedding_dim: int, num_relations: int,
                    rng_seed: int, config: dict | None = None,
                    optimizer: AdamWState | None = None, extra: dict | None = None) -> Path:
    tensors: list[tuple[str, np.ndarray]] = [(n, params[n].data) for n in params]
    if optimizer is not None:
        tensors += [(f"adamw.m/{n}", optimizer.m[n]) for n in params]
        tensors += [(f"adamw.v/{n}", optimizer.v[n]) for n in params]
    header = {
        "format_version": FORMAT_VERSION,
        "embedding_dim": int(embedding_dim),
        "num_relations": int(num_relations),
        "rng_seed": int(rng_seed),
        "config": config or {},
        "optimizer_step": None if optimizer is None else optimizer.step,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


@dataclass
class Checkpoint:
    header: dict
    params: ModelParams
    optimizer: AdamWState | None


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {header.get('format_version')}")
    offset = 8 + hlen
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload at tensor {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                             offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    params = ModelParams({n: a for n, a in arrays.items() if not n.startswith("adamw.")})
    opt = None
    if header.get("optimizer_step") is not None:
        opt = AdamWState(
            step=int(header["optimizer_step"]),
            m={n: arrays[f"adamw.m/{n}"] for n in params},
            v={n: arrays[f"adamw.v/{n}"] for n in params},
        )
    return Checkpoint(header, params, opt)
