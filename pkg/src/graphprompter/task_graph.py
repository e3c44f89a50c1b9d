"""Bipartite prompt/query-label graphs, attention propagation, prediction.

Node layout of a (possibly merged) task graph: all data nodes first, in the
order their embeddings are supplied, then all label nodes.  Each episode
contributes ``m`` label nodes.  Propagation runs in two phases per round:
labels attend over prompt messages only, then every data node attends over
the freshly updated labels.  Queries therefore never influence labels, and
one query's prediction does not depend on the other queries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, softmax
from .nn import ModelParams

T_EDGE, F_EDGE, Q_EDGE = 0, 1, 2
EDGE_TYPES = ("T", "F", "Q")


@dataclass
class TaskGraph:
    num_data: int
    num_labels: int
    prompt_idx: np.ndarray      # data-node index of each prompt
    prompt_label: np.ndarray    # global label-node slot (0..num_labels) of its class
    query_idx: np.ndarray
    query_labels: np.ndarray    # (Q, m) label slots each query is scored against
    # data -> label edges (prompts only); label -> data edges (all data nodes)
    up_src: np.ndarray
    up_dst: np.ndarray
    up_type: np.ndarray
    down_src: np.ndarray
    down_dst: np.ndarray
    down_type: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.down_src)

    @property
    def ways(self) -> int:
        return self.query_labels.shape[1]

    def edge_list(self) -> list[tuple[int, int, str]]:
        """(data node, label node, type) with label nodes numbered after data."""
        return [(int(d), int(self.num_data + l), EDGE_TYPES[t])
                for l, d, t in zip(self.down_src, self.down_dst, self.down_type)]


def build_task_graph(prompt_classes: Sequence[int], num_queries: int, m: int,
                     data_offset: int = 0, label_offset: int = 0) -> TaskGraph:
    """One episode: prompts are data nodes [0, P), queries [P, P + Q)."""
    pc = np.asarray(prompt_classes, dtype=np.intp)
    if len(pc) and (pc.min() < 0 or pc.max() >= m):
        raise ValueError(f"prompt classes must lie in [0, {m})")
    missing = sorted(set(range(m)) - set(pc.tolist()))
    if missing:
        raise ValueError(f"classes {missing} have no prompts")
    P, Q = len(pc), int(num_queries)
    prompt_idx = data_offset + np.arange(P)
    query_idx = data_offset + P + np.arange(Q)
    labels = label_offset + np.arange(m)
    # every prompt -> every label (T on its own class)
    up_src = np.repeat(prompt_idx, m)
    up_dst = np.tile(labels, P)
    up_type = np.where(np.tile(np.arange(m), P) == np.repeat(pc, m), T_EDGE, F_EDGE)
    # labels -> prompts with the same types, labels -> queries typed Q
    down_src = np.concatenate([up_dst, np.tile(labels, Q)])
    down_dst = np.concatenate([up_src, np.repeat(query_idx, m)])
    down_type = np.concatenate([up_type, np.full(Q * m, Q_EDGE)])
    return TaskGraph(P + Q, m, prompt_idx, label_offset + pc, query_idx,
                     np.tile(labels, (Q, 1)), up_src, up_dst, up_type.astype(np.intp),
                     down_src, down_dst, down_type.astype(np.intp))


def merge(graphs: Sequence[TaskGraph]) -> TaskGraph:
    """Disjoint union; data and label numbering is shifted per graph."""
    if len({g.num_labels for g in graphs}) > 1:
        raise ValueError(f"cannot merge task graphs with different ways: {[g.num_labels for g in graphs]}")
    d_off = np.cumsum([0] + [g.num_data for g in graphs])[:-1]
    l_off = np.cumsum([0] + [g.num_labels for g in graphs])[:-1]
    cat = np.concatenate
    return TaskGraph(
        int(sum(g.num_data for g in graphs)), int(sum(g.num_labels for g in graphs)),
        cat([g.prompt_idx + d for g, d in zip(graphs, d_off)]),
        cat([g.prompt_label + l for g, l in zip(graphs, l_off)]),
        cat([g.query_idx + d for g, d in zip(graphs, d_off)]),
        cat([g.query_labels + l for g, l in zip(graphs, l_off)], axis=0),
        cat([g.up_src + d for g, d in zip(graphs, d_off)]),
        cat([g.up_dst + l for g, l in zip(graphs, l_off)]),
        cat([g.up_type for g in graphs]),
        cat([g.down_src + l for g, l in zip(graphs, l_off)]),
        cat([g.down_dst + d for g, d in zip(graphs, d_off)]),
        cat([g.down_type for g in graphs]),
    )


def label_init(tg: TaskGraph, data: Tensor) -> Tensor:
    """Mean embedding of each label's true-class prompts."""
    summed = ag.segment_sum(ag.gather(data, tg.prompt_idx), tg.prompt_label, tg.num_labels)
    counts = np.bincount(tg.prompt_label, minlength=tg.num_labels).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("a label node has no true-class prompts")
    return ag.div_rows(summed, Tensor(counts))


def _attend(params: ModelParams, prefix: str, dst_h: Tensor, src_h: Tensor,
            src, dst, etype, activate: bool) -> Tensor:
    d = dst_h.shape[1]
    msg = ag.add(ag.gather(src_h, src), ag.gather(params["edge_type"], etype))
    q = ag.gather(ag.matmul(dst_h, params[f"{prefix}.W_q"]), dst)
    k = ag.matmul(msg, params[f"{prefix}.W_k"])
    v = ag.matmul(msg, params[f"{prefix}.W_v"])
    att = ag.segment_softmax(ag.scale(ag.row_dot(q, k), 1.0 / np.sqrt(d)), dst, dst_h.shape[0])
    agg = ag.segment_sum(ag.mul_rows(v, att), dst, dst_h.shape[0])
    out = ag.add(ag.matmul(dst_h, params[f"{prefix}.W_self"]), agg)
    return ag.relu(out) if activate else out


def propagate(tg: TaskGraph, data: Tensor, params: ModelParams, rounds: int) -> Tensor:
    """Embedding matrix H, shape (num_data + num_labels, h).

    ReLU follows every round except the last.
    """
    if data.shape[0] != tg.num_data:
        raise ValueError(f"{data.shape[0]} data embeddings for {tg.num_data} data nodes")
    h_data, h_lab = data, label_init(tg, data)
    for r in range(rounds):
        act = r < rounds - 1
        h_lab = _attend(params, f"task_gnn.{r}.label", h_lab, h_data,
                        tg.up_src, tg.up_dst, tg.up_type, act)
        h_data = _attend(params, f"task_gnn.{r}.data", h_data, h_lab,
                         tg.down_src, tg.down_dst, tg.down_type, act)
    return ag.concat([h_data, h_lab], axis=0)


def query_cosines(tg: TaskGraph, H: Tensor) -> Tensor:
    """Cosine of each query to each of its episode's labels, (Q, m)."""
    Q, m = tg.query_labels.shape
    qi = np.repeat(tg.query_idx, m)
    li = tg.num_data + tg.query_labels.reshape(-1)
    cos = ag.cosine_rows(ag.gather(H, qi), ag.gather(H, li))
    return ag.reshape(cos, (Q, m))


def query_logits(tg: TaskGraph, H: Tensor, temperature: float = 1.0) -> Tensor:
    return ag.scale(query_cosines(tg, H), 1.0 / temperature)


@dataclass
class TaskPrediction:
    similarity: np.ndarray   # (Q, m) cosines
    proba: np.ndarray        # (Q, m)
    pred: np.ndarray         # (Q,) episode slot
    confidence: np.ndarray   # (Q,)


def predict(tg: TaskGraph, H: Tensor, temperature: float = 1.0) -> TaskPrediction:
    sim = query_cosines(tg, H).data
    proba = softmax(sim / temperature)
    pred = np.argmax(sim, axis=1)   # first maximum wins ties
    return TaskPrediction(sim, proba, pred, proba.max(axis=1))
