"""Prompt selection: learned importance, kNN similarity, query voting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import ModelParams, mlp

METRICS = ("cosine", "euclidean", "manhattan")


def importance(emb: Tensor, params: ModelParams) -> Tensor:
    """sigmoid(the importance MLP(G)) for a (B, h) batch of embeddings, shape (B,)."""
    expect = params["importance_mlp.W0"].shape[0]
    if emb.data.ndim != 2 or emb.shape[1] != expect:
        raise ValueError(f"selection layer expects (B, {expect}) embeddings, got {emb.shape}")
    return ag.sigmoid(ag.reshape(mlp(params, "importance_mlp", emb), (emb.shape[0],)))


def compute_importance(emb, params: ModelParams) -> tuple[float, np.ndarray]:
    """Importance of one embedding and the importance-weighted embedding."""
    e = np.asarray(emb, dtype=np.float64)
    i = float(importance(Tensor(e[None, :]), params).data[0])
    return i, i * e


def knn_similarity(candidates, queries, metric: str = "cosine") -> np.ndarray:
    """(P, Q) similarity matrix; distances are negated so larger is closer."""
    P = np.asarray(candidates, dtype=np.float64)
    Q = np.asarray(queries, dtype=np.float64)
    if metric == "cosine":
        return ag.cosine_similarity(Tensor(P), Tensor(Q)).data
    diff = P[:, None, :] - Q[None, :, :]
    if metric == "euclidean":
        return -np.sqrt((diff ** 2).sum(axis=2))
    if metric == "manhattan":
        return -np.abs(diff).sum(axis=2)
    raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def score(sim, i_p, i_q):
    """Selection score: similarity plus the product of both importances."""
    return sim + i_p * i_q


def score_matrix(sim: np.ndarray, i_p: np.ndarray, i_q: np.ndarray) -> np.ndarray:
    return score(np.asarray(sim), np.asarray(i_p)[:, None], np.asarray(i_q)[None, :])


@dataclass
class SelectionResult:
    """Chosen candidate rows per class (best first) plus the evidence."""

    chosen: dict[int, list[int]]
    scores: np.ndarray | None = None
    votes: np.ndarray | None = None
    topk: list[list[int]] = field(default_factory=list)

    def rows(self) -> list[int]:
        return [r for c in self.chosen for r in self.chosen[c]]


def _top(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest values; ties go to the lower position."""
    return np.argsort(-values, kind="stable")[:k]


def _group(classes: Sequence[int]) -> dict[int, np.ndarray]:
    classes = np.asarray(classes)
    order: dict[int, list[int]] = {}
    for row, c in enumerate(classes.tolist()):
        order.setdefault(int(c), []).append(row)
    return {c: np.array(r, dtype=np.intp) for c, r in order.items()}


def vote_select(scores, classes: Sequence[int], k: int) -> SelectionResult:
    """Query voting, then the k best-voted candidates of each class.

    Each query votes for its top-k candidates over the whole pool, with its
    score as the vote weight; within every class the k candidates with the
    largest vote totals are kept.  Ties go to the lower candidate row.
    ``scores`` is (P, Q); ``classes[p]`` is the class of row ``p``.
    """
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != len(classes):
        raise ValueError(f"scores shape {S.shape} does not match {len(classes)} candidates")
    groups = _group(classes)
    for c, rows in groups.items():
        if len(rows) < k:
            raise ValueError(f"class {c} has {len(rows)} candidates, fewer than k={k}")
    votes = np.zeros(S.shape[0])
    topk = []
    for q in range(S.shape[1]):
        top = _top(S[:, q], k)
        topk.append(top.tolist())
        votes[top] += S[top, q]
    chosen = {c: rows[_top(votes[rows], k)].tolist() for c, rows in groups.items()}
    return SelectionResult(chosen, S, votes, topk)


def random_select(classes: Sequence[int], k: int, rng: np.random.Generator) -> SelectionResult:
    """Uniform k-subset per class, in candidate order within the class."""
    chosen: dict[int, list[int]] = {}
    for c, rows in _group(classes).items():
        if len(rows) < k:
            raise ValueError(f"class {c} has {len(rows)} candidates, fewer than k={k}")
        pick = np.sort(rng.choice(len(rows), size=k, replace=False))
        chosen[c] = rows[pick].tolist()
    return SelectionResult(chosen)
