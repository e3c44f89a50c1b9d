"""Data graphs: sampled neighborhoods around input points, learned edge
weights, and a weighted-mean message-passing encoder.

Everything here works on batches: a list of :class:`DataGraph` is packed
into one disjoint union (:class:`DataGraphBatch`) so a whole episode, or a
whole training step, is reweighted and encoded with a handful of dense ops.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import Graph, InputPoint
from .nn import ModelParams, mlp

_ZERO_DEGREE = 1e-12


@dataclass(frozen=True)
class DataGraph:
    """Local subgraph around one input point.

    ``nodes`` holds graph node indices with the centers first; ``src``,
    ``dst`` index into ``nodes``.  ``weights`` is set by
    :func:`reconstruct_edge_weights`.
    """

    kind: str
    nodes: np.ndarray
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    n_centers: int
    weights: np.ndarray | None = None
    embedding: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def center_positions(self) -> np.ndarray:
        return np.arange(self.n_centers)


def sample_data_graph(g: Graph, x: InputPoint, l: int, max_nodes: int,
                      rng: np.random.Generator) -> DataGraph:
    """Random-walk neighborhood of ``x``.

    From each center: add the current node's neighbors, hop to a uniformly
    random neighbor, repeat ``l`` times; stop once ``max_nodes`` nodes are
    collected.  For edge points the two walks share the node budget, and the
    edges joining head and tail are left out so the target label is not part
    of its own context.
    """
    centers = [g.index(v) for v in x.ids]
    if l < 1:
        raise ValueError(f"hop count must be >= 1, got {l}")
    if max_nodes < len(centers) + 1:
        raise ValueError(f"max_nodes={max_nodes} leaves no room beyond {len(centers)} center(s)")
    order: list[int] = []
    seen: set[int] = set()
    for c in centers:
        if c not in seen:
            seen.add(c)
            order.append(c)

    for c in centers:
        cur = c
        for step in range(l):
            if len(order) >= max_nodes:
                break
            nbrs = g.neighbor_indices(cur)
            if len(nbrs) == 0:
                break
            fresh = [v for v in nbrs.tolist() if v not in seen]
            room = max_nodes - len(order)
            if len(fresh) > room:
                fresh = [fresh[i] for i in np.sort(rng.choice(len(fresh), size=room, replace=False))]
            for v in fresh:
                seen.add(v)
                order.append(v)
            if step < l - 1:
                cur = int(nbrs[rng.integers(len(nbrs))])

    nodes = np.array(order, dtype=np.int64)
    other, eid = g.incident_many(nodes)
    keep = np.isin(other, nodes)
    if x.kind == "edge":
        keep &= ~np.isin(eid, g.edge_between(centers[0], centers[1]))
    eids = np.unique(eid[keep])
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    src = local[g.src[eids]]
    dst = local[g.dst[eids]]
    rel = g.rel[eids].astype(np.int64)
    return DataGraph(x.kind, nodes, g.features[nodes], src, dst, rel, len(set(centers)))


class DataGraphBatch:
    """Disjoint union of data graphs with the index arrays the ops need."""

    def __init__(self, graphs: Sequence[DataGraph]):
        self.graphs = list(graphs)
        if not self.graphs:
            raise ValueError("empty data graph batch")
        sizes = np.array([dg.num_nodes for dg in self.graphs])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.num_graphs = len(self.graphs)
        self.num_nodes = int(sizes.sum())
        self.x = Tensor(np.concatenate([dg.features for dg in self.graphs], axis=0))
        self.src = np.concatenate([dg.src + o for dg, o in zip(self.graphs, offsets)]).astype(np.intp)
        self.dst = np.concatenate([dg.dst + o for dg, o in zip(self.graphs, offsets)]).astype(np.intp)
        self.rel = np.concatenate([dg.rel for dg in self.graphs]).astype(np.intp)
        self.edge_counts = np.array([dg.num_edges for dg in self.graphs])
        ro_idx, ro_seg = [], []
        for gi, (dg, o) in enumerate(zip(self.graphs, offsets)):
            ro_idx.extend(range(o, o + dg.n_centers))
            ro_seg.extend([gi] * dg.n_centers)
        self.readout_idx = np.array(ro_idx, dtype=np.intp)
        self.readout_seg = np.array(ro_seg, dtype=np.intp)
        self.readout_count = np.bincount(self.readout_seg, minlength=self.num_graphs).astype(np.float64)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def split_weights(self, w: np.ndarray) -> list[np.ndarray]:
        return np.split(np.asarray(w), np.cumsum(self.edge_counts)[:-1])


def edge_weights(batch: DataGraphBatch, params: ModelParams, reweight_input: str = "node") -> Tensor:
    """Per-edge weight sigmoid(the edge MLP(...)) for the whole batch, shape (E,).

    ``reweight_input="node"`` feeds the concatenated endpoint features,
    ``"edge"`` feeds the relation embedding of the edge.
    """
    if reweight_input == "node":
        inp = ag.concat([ag.gather(batch.x, batch.src), ag.gather(batch.x, batch.dst)], axis=1)
    elif reweight_input == "edge":
        table = params["rel_emb"]
        if batch.num_edges and batch.rel.max() >= table.shape[0]:
            raise KeyError(f"no relation embedding for relation id {int(batch.rel.max())}")
        inp = ag.gather(table, batch.rel)
    else:
        raise ValueError(f"reweight_input must be 'node' or 'edge', got {reweight_input!r}")
    z = mlp(params, "edge_mlp", inp)
    return ag.sigmoid(ag.reshape(z, (batch.num_edges,)))


def encode_batch(batch: DataGraphBatch, weights: Tensor, params: ModelParams, layers: int) -> Tensor:
    """Weighted-mean message passing followed by center readout, (B, h)."""
    if weights.shape != (batch.num_edges,):
        raise ValueError(f"expected {batch.num_edges} edge weights, got shape {weights.shape}")
    n = batch.num_nodes
    send = np.concatenate([batch.src, batch.dst])
    recv = np.concatenate([batch.dst, batch.src])
    w2 = ag.concat([weights, weights])
    den = ag.segment_sum(w2, recv, n)
    # isolated (or fully down-weighted) nodes keep only their self term
    dead = (den.data < _ZERO_DEGREE).astype(np.float64)
    den = ag.add(den, Tensor(dead))
    h = batch.x
    for i in range(layers):
        msg = ag.mul_rows(ag.gather(h, send), w2)
        agg = ag.div_rows(ag.segment_sum(msg, recv, n), den)
        h = ag.relu(ag.add(ag.matmul(h, params[f"encoder.{i}.W_self"]),
                           ag.matmul(agg, params[f"encoder.{i}.W_neigh"])))
    pooled = ag.segment_sum(ag.gather(h, batch.readout_idx), batch.readout_seg, batch.num_graphs)
    return ag.div_rows(pooled, Tensor(batch.readout_count))


def reconstruct_edge_weights(dg: DataGraph, params: ModelParams,
                             reweight_input: str = "node") -> DataGraph:
    if dg.num_edges == 0:
        return replace(dg, weights=np.zeros(0))
    w = edge_weights(DataGraphBatch([dg]), params, reweight_input)
    return replace(dg, weights=w.data.copy())


def encode_data_graph(dg: DataGraph, params: ModelParams, layers: int) -> np.ndarray:
    if dg.weights is None:
        raise ValueError("edge weights are not set; run reconstruct_edge_weights first")
    batch = DataGraphBatch([dg])
    return encode_batch(batch, Tensor(dg.weights), params, layers).data[0].copy()
