"""Model hyperparameters, parameter layout and the shared embedding pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .generator import DataGraph, DataGraphBatch, encode_batch, edge_weights, sample_data_graph
from .graph import Graph, InputPoint
from .nn import ModelParams, add_mlp, uniform_init
from .selector import importance


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    embedding_dim: int = 64
    num_relations: int = 1
    reweight_input: str = "node"     # "node": endpoint features, "edge": relation embedding
    gnn_depth: int = 2
    task_rounds: int = 2
    temperature: float = 0.1
    l_hops: int = 1
    max_subgraph_nodes: int = 20

    def __post_init__(self):
        if self.reweight_input not in ("node", "edge"):
            raise ValueError(f"reweight_input must be 'node' or 'edge', got {self.reweight_input!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        for name in ("feature_dim", "embedding_dim", "gnn_depth", "l_hops"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.task_rounds < 0:
            raise ValueError("task_rounds must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    h, d = cfg.embedding_dim, cfg.feature_dim
    p = ModelParams()
    if cfg.reweight_input == "edge":
        p.add("rel_emb", rng.normal(scale=1.0 / np.sqrt(h), size=(cfg.num_relations, h)))
        add_mlp(p, "edge_mlp", [h, h, 1], rng)
    else:
        add_mlp(p, "edge_mlp", [2 * d, h, 1], rng)
    for i in range(cfg.gnn_depth):
        fin = d if i == 0 else h
        p.add(f"encoder.{i}.W_self", uniform_init(rng, fin, (fin, h)))
        p.add(f"encoder.{i}.W_neigh", uniform_init(rng, fin, (fin, h)))
    add_mlp(p, "importance_mlp", [h, h, 1], rng)
    p.add("edge_type", rng.normal(scale=1.0 / np.sqrt(h), size=(3, h)))
    for r in range(cfg.task_rounds):
        for phase in ("label", "data"):
            for w in ("W_q", "W_k", "W_v", "W_self"):
                p.add(f"task_gnn.{r}.{phase}.{w}", uniform_init(rng, h, (h, h)))
    return p


def sample_batch(g: Graph, points: Sequence[InputPoint], cfg: ModelConfig,
                 rng: np.random.Generator) -> DataGraphBatch:
    return DataGraphBatch([sample_data_graph(g, x, cfg.l_hops, cfg.max_subgraph_nodes, rng)
                           for x in points])


@dataclass
class Embedded:
    """Data-graph embeddings of a list of points."""

    batch: DataGraphBatch
    weights: Tensor      # (E,)
    raw: Tensor          # (B, h) encoder output
    importance: Tensor   # (B,)

    @property
    def weighted(self) -> Tensor:
        return ag.mul_rows(self.raw, self.importance)


def embed(batch: DataGraphBatch, params: ModelParams, cfg: ModelConfig,
          reweight: bool = True) -> Embedded:
    """Reweight edges, encode, and score importance for a data-graph batch.

    ``reweight=False`` puts weight 1 on every edge (plain neighbor mean).
    """
    if reweight:
        w = edge_weights(batch, params, cfg.reweight_input)
    else:
        w = Tensor(np.ones(batch.num_edges))
    raw = encode_batch(batch, w, params, cfg.gnn_depth)
    return Embedded(batch, w, raw, importance(raw, params))


def data_graphs(batch: DataGraphBatch, emb: Embedded) -> list[DataGraph]:
    """Per-graph copies carrying weights and embeddings (for inspection)."""
    ws = batch.split_weights(emb.weights.data)
    return [replace(dg, weights=w.copy(), embedding=emb.raw.data[i].copy())
            for i, (dg, w) in enumerate(zip(batch.graphs, ws))]
