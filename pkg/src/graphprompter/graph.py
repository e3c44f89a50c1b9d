"""Immutable multi-relational graphs, file I/O, synthetic generators and
episode pools.

Graph file format (``format_version`` 1), one JSON object::

    {"format_version": 1, "feature_dim": d,
     "nodes": [{"id": 0, "feat": [...], "label": 3}, ...],
     "edges": [{"src": 0, "rel": 0, "dst": 5, "label": 0}, ...],
     "relations": {"0": "link"}}

``label`` is optional on nodes and edges.  Files are written with one node
or edge record per line so that load errors can point at a line number.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
NO_LABEL = -1


class GraphFormatError(ValueError):
    """Malformed or inconsistent graph data."""


class InsufficientDataError(ValueError):
    """An episode asks for more labeled points than a class provides."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Graph:
    """Nodes with features and optional labels, plus labelled relation edges.

    Node ids are arbitrary distinct integers; internally nodes are addressed
    by their position in ``node_ids``.  Edges keep their (src, rel, dst)
    orientation but neighbor queries see both directions.
    """

    def __init__(self, node_ids, features, node_labels, src, rel, dst,
                 edge_labels=None, relations: dict[int, str] | None = None):
        node_ids = np.asarray(node_ids, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != node_ids.shape[0]:
            raise GraphFormatError(
                f"features must be (num_nodes, d); got {features.shape} for {node_ids.shape[0]} nodes")
        if len(np.unique(node_ids)) != len(node_ids):
            raise GraphFormatError("duplicate node ids")
        self._index = {int(v): i for i, v in enumerate(node_ids)}
        self.node_ids = _frozen(node_ids)
        self.features = _frozen(features)
        node_labels = np.full(len(node_ids), NO_LABEL) if node_labels is None else node_labels
        self.node_labels = _frozen(np.asarray(node_labels, dtype=np.int64))

        src_ids = np.asarray(src, dtype=np.int64)
        dst_ids = np.asarray(dst, dtype=np.int64)
        self.rel = _frozen(np.asarray(rel, dtype=np.int64))
        for name, ids in (("src", src_ids), ("dst", dst_ids)):
            for e, v in enumerate(ids):
                if int(v) not in self._index:
                    raise GraphFormatError(f"edge {e}: {name} references missing node {int(v)}")
        self.src = _frozen(np.array([self._index[int(v)] for v in src_ids], dtype=np.int64))
        self.dst = _frozen(np.array([self._index[int(v)] for v in dst_ids], dtype=np.int64))
        if not (len(self.src) == len(self.dst) == len(self.rel)):
            raise GraphFormatError("src, rel and dst must have equal length")
        edge_labels = np.full(len(self.src), NO_LABEL) if edge_labels is None else edge_labels
        self.edge_labels = _frozen(np.asarray(edge_labels, dtype=np.int64))
        if relations is None:
            relations = {int(r): str(int(r)) for r in np.unique(self.rel)}
        self.relations = {int(k): str(v) for k, v in relations.items()}
        missing = set(np.unique(self.rel).tolist()) - set(self.relations)
        if missing:
            raise GraphFormatError(f"edges use undeclared relation ids {sorted(missing)}")
        self._build_adjacency()

    # ---------------------------------------------------------- structure
    def _build_adjacency(self) -> None:
        n, m = self.num_nodes, self.num_edges
        # every edge appears once from each endpoint: direction +1 from src, -1 from dst
        owner = np.concatenate([self.src, self.dst])
        other = np.concatenate([self.dst, self.src])
        rel = np.concatenate([self.rel, self.rel])
        direction = np.concatenate([np.ones(m, np.int64), -np.ones(m, np.int64)])
        eid = np.concatenate([np.arange(m), np.arange(m)])
        order = np.lexsort((direction, rel, other, owner))
        self._adj_other = _frozen(other[order])
        self._adj_rel = _frozen(rel[order])
        self._adj_dir = _frozen(direction[order])
        self._adj_eid = _frozen(eid[order])
        counts = np.bincount(owner, minlength=n)
        self._indptr = _frozen(np.concatenate([[0], np.cumsum(counts)]))
        self._nbr_cache: dict[int, np.ndarray] = {}
        self._degrees: np.ndarray | None = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_relations(self) -> int:
        return max(self.relations) + 1 if self.relations else 0

    def index(self, node_id: int) -> int:
        try:
            return self._index[int(node_id)]
        except KeyError:
            raise KeyError(f"unknown node id {node_id}") from None

    def incident(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(other endpoint, relation, direction, edge index) for node index ``i``."""
        lo, hi = self._indptr[i], self._indptr[i + 1]
        return self._adj_other[lo:hi], self._adj_rel[lo:hi], self._adj_dir[lo:hi], self._adj_eid[lo:hi]

    def neighbor_indices(self, i: int) -> np.ndarray:
        """Distinct neighbor indices of node index ``i``, ascending."""
        cached = self._nbr_cache.get(i)
        if cached is None:
            lo, hi = self._indptr[i], self._indptr[i + 1]
            cached = np.unique(self._adj_other[lo:hi])
            self._nbr_cache[i] = cached
        return cached

    def degree(self, i: int) -> int:
        return int(self.degrees[i])

    @property
    def degrees(self) -> np.ndarray:
        """Number of distinct neighbors per node index."""
        if self._degrees is None:
            self._degrees = _frozen(np.array(
                [len(self.neighbor_indices(i)) for i in range(self.num_nodes)], dtype=np.int64))
        return self._degrees

    def incident_many(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(other endpoint, edge index) for all incidences of the given nodes."""
        lo, hi = self._indptr[idx], self._indptr[idx + 1]
        take = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if len(idx) else np.zeros(0, np.intp)
        return self._adj_other[take], self._adj_eid[take]

    def edge_between(self, u: int, v: int) -> list[int]:
        """Edge indices joining node indices ``u`` and ``v`` in either direction."""
        other, _, _, eid = self.incident(u)
        return sorted(set(eid[other == v].tolist()))

    def check(self) -> None:
        """Recompute adjacency from the edge list and compare."""
        for i in range(self.num_nodes):
            other, rel, direction, eid = self.incident(i)
            got = sorted(zip(other.tolist(), rel.tolist(), direction.tolist(), eid.tolist()))
            want = sorted(
                [(int(self.dst[e]), int(self.rel[e]), 1, e) for e in np.flatnonzero(self.src == i)]
                + [(int(self.src[e]), int(self.rel[e]), -1, e) for e in np.flatnonzero(self.dst == i)])
            if got != want:
                raise GraphFormatError(f"adjacency mismatch at node index {i}")

    def structurally_equal(self, other: "Graph") -> bool:
        def key(g: "Graph"):
            nodes = sorted((int(g.node_ids[i]), tuple(g.features[i].tolist()), int(g.node_labels[i]))
                           for i in range(g.num_nodes))
            edges = sorted((int(g.node_ids[g.src[e]]), int(g.rel[e]), int(g.node_ids[g.dst[e]]),
                            int(g.edge_labels[e])) for e in range(g.num_edges))
            return nodes, edges, g.relations
        return key(self) == key(other)

    def __repr__(self) -> str:
        return (f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, "
                f"feature_dim={self.feature_dim}, num_relations={len(self.relations)})")


def neighbors(g: Graph, v: int, hop: int = 1) -> list[tuple[int, int, int]]:
    """Sorted ``(neighbor id, relation id, direction)`` triples of node id ``v``.

    ``direction`` is +1 for edges leaving ``v`` and -1 for edges entering it.
    """
    if hop != 1:
        raise ValueError("only 1-hop neighbor queries are supported")
    other, rel, direction, _ = g.incident(g.index(v))
    ids = g.node_ids[other]
    return sorted(set(zip(ids.tolist(), rel.tolist(), direction.tolist())))


# ----------------------------------------------------------------- file I/O

def save_graph(g: Graph, path) -> Path:
    path = Path(path)
    lines = ['{"format_version": %d, "feature_dim": %d,' % (FORMAT_VERSION, g.feature_dim)]
    lines.append('"relations": %s,' % json.dumps({str(k): v for k, v in sorted(g.relations.items())}))
    lines.append('"nodes": [')
    for i in range(g.num_nodes):
        rec = {"id": int(g.node_ids[i]), "feat": g.features[i].tolist()}
        if g.node_labels[i] != NO_LABEL:
            rec["label"] = int(g.node_labels[i])
        lines.append(json.dumps(rec) + ("," if i < g.num_nodes - 1 else ""))
    lines.append('],')
    lines.append('"edges": [')
    for e in range(g.num_edges):
        rec = {"src": int(g.node_ids[g.src[e]]), "rel": int(g.rel[e]), "dst": int(g.node_ids[g.dst[e]])}
        if g.edge_labels[e] != NO_LABEL:
            rec["label"] = int(g.edge_labels[e])
        lines.append(json.dumps(rec) + ("," if e < g.num_edges - 1 else ""))
    lines.append(']}')
    path.write_text("\n".join(lines) + "\n")
    return path


def _record_lines(text: str) -> dict[tuple[str, int], int]:
    """Map ("nodes"|"edges", record index) -> 1-based line number."""
    where: dict[tuple[str, int], int] = {}
    section, count = None, 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith('"nodes"'):
            section, count = "nodes", 0
        elif s.startswith('"edges"'):
            section, count = "edges", 0
        elif section and s.startswith("{"):
            where[(section, count)] = lineno
            count += 1
    return where


def load_graph(path) -> Graph:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{path}: top level must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise GraphFormatError(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    lines = _record_lines(text)

    def fail(section: str, i: int, msg: str):
        line = lines.get((section, i))
        at = f"line {line}" if line else f"{section}[{i}]"
        raise GraphFormatError(f"{path}: {at}: {msg}")

    d = doc.get("feature_dim")
    ids, feats, labels = [], [], []
    for i, rec in enumerate(doc.get("nodes", [])):
        if not isinstance(rec, dict) or "id" not in rec or "feat" not in rec:
            fail("nodes", i, "node record needs 'id' and 'feat'")
        if d is not None and len(rec["feat"]) != d:
            fail("nodes", i, f"feature length {len(rec['feat'])} != feature_dim {d}")
        ids.append(int(rec["id"]))
        feats.append(rec["feat"])
        labels.append(int(rec.get("label", NO_LABEL)))
    known = set(ids)
    src, rel, dst, elabels = [], [], [], []
    for e, rec in enumerate(doc.get("edges", [])):
        if not isinstance(rec, dict) or not {"src", "rel", "dst"} <= set(rec):
            fail("edges", e, "edge record needs 'src', 'rel' and 'dst'")
        for key in ("src", "dst"):
            if int(rec[key]) not in known:
                fail("edges", e, f"edge {e} references missing node {int(rec[key])}")
        src.append(int(rec["src"]))
        rel.append(int(rec["rel"]))
        dst.append(int(rec["dst"]))
        elabels.append(int(rec.get("label", NO_LABEL)))
    relations = {int(k): v for k, v in doc.get("relations", {}).items()}
    features = np.asarray(feats, dtype=np.float64).reshape(len(ids), d if d is not None else -1)
    return Graph(ids, features, labels, src, rel, dst, elabels, relations or None)


# --------------------------------------------------------------- generators

def generate_sbm(blocks: int, nodes_per_block: int, p_in: float, p_out: float,
                 feature_dim: int = 16, seed: int = 0, noise: float = 1.0) -> Graph:
    """Stochastic block model; node label = block, feature = block mean + noise."""
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if blocks < 1 or nodes_per_block < 1 or feature_dim < 1:
        raise ValueError("blocks, nodes_per_block and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    means = rng.normal(size=(blocks, feature_dim))
    feats = means[labels] + noise * rng.normal(size=(n, feature_dim))
    src, dst = [], []
    for a in range(blocks):
        for b in range(a, blocks):
            p = p_in if a == b else p_out
            hit = rng.random((nodes_per_block, nodes_per_block)) < p
            if a == b:
                hit = np.triu(hit, k=1)
            i, j = np.nonzero(hit)
            src.append(i + a * nodes_per_block)
            dst.append(j + b * nodes_per_block)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    return Graph(np.arange(n), feats, labels, src, np.zeros_like(src), dst,
                 relations={0: "link"})


def sbm_expected_edges(blocks: int, nodes_per_block: int, p_in: float, p_out: float):
    """(within-block, between-block) expected edge counts."""
    within = blocks * nodes_per_block * (nodes_per_block - 1) / 2 * p_in
    between = blocks * (blocks - 1) / 2 * nodes_per_block ** 2 * p_out
    return within, between


def _clusters_for(num_relations: int) -> int:
    c = 2
    while c * (c - 1) // 2 < num_relations:
        c += 1
    return c


def generate_synthetic_kg(num_entities: int, num_relations: int, triples_per_relation: int,
                          num_clusters: int | None = None, feature_dim: int = 16,
                          seed: int = 0, noise: float = 1.0) -> Graph:
    """Entity clusters with one distinct unordered cluster pair per relation.

    Relation ``r`` links a head drawn from its source cluster to a tail drawn
    from its target cluster, so the pair of endpoint clusters identifies the
    relation.  Entity features are cluster mean plus Gaussian noise.  Edge
    labels equal relation ids; node labels are the entity clusters.
    """
    if min(num_entities, num_relations, triples_per_relation, feature_dim) < 1:
        raise ValueError("generator parameters must be positive")
    num_clusters = num_clusters or _clusters_for(num_relations)
    pairs = list(combinations(range(num_clusters), 2))
    if len(pairs) < num_relations:
        raise ValueError(f"{num_clusters} clusters give only {len(pairs)} signatures "
                         f"for {num_relations} relations")
    if num_entities < 2 * num_clusters:
        raise ValueError("need at least two entities per cluster")
    rng = np.random.default_rng(seed)
    cluster = np.arange(num_entities) % num_clusters
    rng.shuffle(cluster)
    means = rng.normal(size=(num_clusters, feature_dim))
    feats = means[cluster] + noise * rng.normal(size=(num_entities, feature_dim))
    members = [np.flatnonzero(cluster == c) for c in range(num_clusters)]
    chosen = rng.choice(len(pairs), size=num_relations, replace=False)
    signatures = []
    for idx in chosen:
        a, b = pairs[idx]
        signatures.append((a, b) if rng.random() < 0.5 else (b, a))
    capacity = min(len(members[a]) * len(members[b]) for a, b in signatures)
    if capacity < triples_per_relation:
        raise ValueError(f"cluster pairs admit at most {capacity} triples per relation")
    used: set[tuple[int, int]] = set()
    src, rel, dst = [], [], []
    for r, (a, b) in enumerate(signatures):
        made = 0
        while made < triples_per_relation:
            h = int(rng.choice(members[a]))
            t = int(rng.choice(members[b]))
            key = (min(h, t), max(h, t))
            if key in used:
                continue
            used.add(key)
            src.append(h)
            rel.append(r)
            dst.append(t)
            made += 1
    relations = {r: f"rel{r}" for r in range(num_relations)}
    g = Graph(np.arange(num_entities), feats, cluster, src, rel, dst, rel, relations)
    g.relation_signatures = {r: sig for r, sig in enumerate(signatures)}
    return g


# --------------------------------------------------------------- episodes

@dataclass(frozen=True)
class InputPoint:
    """A node (1 id) or a (head, tail) edge (2 ids) with its class."""

    kind: str
    ids: tuple[int, ...]
    label: int = NO_LABEL

    def __post_init__(self):
        if self.kind not in ("node", "edge"):
            raise ValueError(f"kind must be 'node' or 'edge', got {self.kind!r}")
        want = 1 if self.kind == "node" else 2
        if len(self.ids) != want:
            raise ValueError(f"{self.kind} point needs {want} id(s), got {self.ids}")

    def validate(self, g: Graph) -> None:
        idx = [g.index(v) for v in self.ids]
        if self.kind == "edge" and not g.edge_between(idx[0], idx[1]):
            raise ValueError(f"no edge joins {self.ids[0]} and {self.ids[1]}")

    @property
    def key(self) -> str:
        return "-".join(str(v) for v in self.ids)


@dataclass(frozen=True)
class EpisodeSpec:
    m: int
    k: int
    N: int
    n: int
    l: int = 1
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"an episode needs m >= 2 classes, got {self.m}")
        if not 1 <= self.k <= self.N:
            raise ValueError(f"need 1 <= k <= N, got k={self.k}, N={self.N}")
        if self.l < 1:
            raise ValueError(f"hop radius must be >= 1, got {self.l}")
        if self.n < 1:
            raise ValueError(f"need at least one query, got n={self.n}")
        if self.classes and len(self.classes) != self.m:
            raise ValueError(f"{len(self.classes)} classes given for m={self.m}")

    def with_classes(self, classes: Sequence[int]) -> "EpisodeSpec":
        return EpisodeSpec(self.m, self.k, self.N, self.n, self.l, tuple(int(c) for c in classes))


@dataclass
class PointPool:
    """Labelled points of one graph, partitioned per class into train/test."""

    kind: str
    train: dict[int, list[InputPoint]] = field(default_factory=dict)
    test: dict[int, list[InputPoint]] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.train) | set(self.test))

    def restrict(self, classes: Iterable[int]) -> "PointPool":
        keep = set(int(c) for c in classes)
        return PointPool(self.kind,
                         {c: v for c, v in self.train.items() if c in keep},
                         {c: v for c, v in self.test.items() if c in keep})


def make_point_pool(g: Graph, kind: str = "node", train_frac: float = 0.5,
                    seed: int = 0) -> PointPool:
    """Split every labelled node (or edge) into train and test, per class."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[InputPoint]] = {}
    if kind == "node":
        for i in np.flatnonzero(g.node_labels != NO_LABEL):
            c = int(g.node_labels[i])
            by_class.setdefault(c, []).append(InputPoint("node", (int(g.node_ids[i]),), c))
    elif kind == "edge":
        seen = set()
        for e in np.flatnonzero(g.edge_labels != NO_LABEL):
            h, t = int(g.node_ids[g.src[e]]), int(g.node_ids[g.dst[e]])
            if (h, t) in seen:
                continue
            seen.add((h, t))
            c = int(g.edge_labels[e])
            by_class.setdefault(c, []).append(InputPoint("edge", (h, t), c))
    else:
        raise ValueError(f"kind must be 'node' or 'edge', got {kind!r}")
    pool = PointPool(kind)
    for c in sorted(by_class):
        pts = by_class[c]
        order = rng.permutation(len(pts))
        cut = int(round(train_frac * len(pts)))
        pool.train[c] = [pts[i] for i in order[:cut]]
        pool.test[c] = [pts[i] for i in order[cut:]]
    return pool


def draw_classes(class_pool: Sequence[int], m: int, rng: np.random.Generator) -> tuple[int, ...]:
    class_pool = list(class_pool)
    if m > len(class_pool):
        raise InsufficientDataError(f"{m}-way episode from only {len(class_pool)} classes")
    picks = rng.choice(len(class_pool), size=m, replace=False)
    return tuple(int(class_pool[i]) for i in picks)


def split_episode_pool(pool: PointPool, spec: EpisodeSpec, rng: np.random.Generator,
                       partition: str = "test"):
    """Draw N candidates per class from train and n queries from ``partition``.

    With ``partition="train"`` (pretraining) queries come from the train
    split too, excluding points already drawn as candidates.
    Returns ``(candidates: {class: [InputPoint]}, queries: [InputPoint])``.
    """
    if partition not in ("train", "test"):
        raise ValueError(f"partition must be 'train' or 'test', got {partition!r}")
    if not spec.classes:
        raise ValueError("episode has no classes drawn")
    candidates: dict[int, list[InputPoint]] = {}
    leftovers: list[InputPoint] = []
    for c in spec.classes:
        train = pool.train.get(c, [])
        if len(train) < spec.N:
            raise InsufficientDataError(
                f"class {c} has {len(train)} training points, needs {spec.N} candidates")
        order = rng.permutation(len(train))
        candidates[c] = [train[i] for i in order[:spec.N]]
        rest = [train[i] for i in order[spec.N:]] if partition == "train" else pool.test.get(c, [])
        if not rest:
            raise InsufficientDataError(f"class {c} has no {partition} points left for queries")
        leftovers.extend(rest)
    n = min(spec.n, len(leftovers))
    picks = rng.choice(len(leftovers), size=n, replace=False)
    queries = [leftovers[i] for i in picks]
    return candidates, queries
