"""scikit-learn style wrapper around pretraining and in-context inference.

``fit`` pretrains on a graph; ``transform`` returns data-graph embeddings;
``predict`` / ``predict_proba`` classify query points against labelled
candidate points in one episode; ``score`` streams episodes and reports
accuracy.  Inputs are graphs and :class:`InputPoint` lists rather than
feature matrices, so the validation helpers below replace ``check_array``.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augmenter import PromptCache
from .graph import Graph, InputPoint, PointPool, make_point_pool
from .inference import ABLATIONS, InferenceConfig, evaluate, run_episode, run_inference
from .model import ModelConfig, embed, sample_batch
from .nn import ModelParams
from .trainer import TrainConfig, TrainState, pretrain


def check_graph(g, feature_dim: int | None = None) -> Graph:
    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph, got {type(g).__name__}")
    if feature_dim is not None and g.feature_dim != feature_dim:
        raise ValueError(f"graph has {g.feature_dim} features per node, model expects {feature_dim}")
    return g


def check_points(g: Graph, points, kind: str | None = None, labelled: bool = False) -> list[InputPoint]:
    points = list(points)
    if not points:
        raise ValueError("no input points given")
    for p in points:
        if not isinstance(p, InputPoint):
            raise TypeError(f"expected InputPoint, got {type(p).__name__}")
        if kind is not None and p.kind != kind:
            raise ValueError(f"expected {kind} points, got a {p.kind} point {p.ids}")
        if labelled and p.label < 0:
            raise ValueError(f"point {p.ids} has no label")
        p.validate(g)
    return points


class GraphPrompter(BaseEstimator):
    """Pretrained graph in-context learner with adaptive prompt selection."""

    def __init__(self, task_kind="node", embedding_dim=64, gnn_depth=2, task_rounds=2,
                 temperature=0.1, l_hops=1, max_subgraph_nodes=20, ways=5, shots=3,
                 queries=4, batch_episodes=4, steps=1000, lr=1e-3, weight_decay=1e-3,
                 pretrain_classes=None, selector="adaptive", candidates=10, metric="cosine",
                 cache_capacity=3, admit_floor=0.5, touch_k=1, ablate=(), seed=0):
        self.task_kind = task_kind
        self.embedding_dim = embedding_dim
        self.gnn_depth = gnn_depth
        self.task_rounds = task_rounds
        self.temperature = temperature
        self.l_hops = l_hops
        self.max_subgraph_nodes = max_subgraph_nodes
        self.ways = ways
        self.shots = shots
        self.queries = queries
        self.batch_episodes = batch_episodes
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.pretrain_classes = pretrain_classes
        self.selector = selector
        self.candidates = candidates
        self.metric = metric
        self.cache_capacity = cache_capacity
        self.admit_floor = admit_floor
        self.touch_k = touch_k
        self.ablate = ablate
        self.seed = seed

    # ------------------------------------------------------------ configs

    def _model_config(self, g: Graph) -> ModelConfig:
        return ModelConfig(
            feature_dim=g.feature_dim, embedding_dim=self.embedding_dim,
            num_relations=max(g.num_relations, 1),
            reweight_input="edge" if self.task_kind == "edge" else "node",
            gnn_depth=self.gnn_depth, task_rounds=self.task_rounds,
            temperature=self.temperature, l_hops=self.l_hops,
            max_subgraph_nodes=self.max_subgraph_nodes)

    def _train_config(self) -> TrainConfig:
        classes = None if self.pretrain_classes is None else tuple(int(c) for c in self.pretrain_classes)
        return TrainConfig(ways=self.ways, shots=self.shots, queries=self.queries,
                           batch_episodes=self.batch_episodes, steps=self.steps, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.seed,
                           pretrain_classes=classes)

    def inference_config(self, **overrides) -> InferenceConfig:
        base = dict(ways=self.ways, shots=self.shots, candidates=self.candidates,
                    queries=self.queries, selector=self.selector, metric=self.metric,
                    cache_capacity=self.cache_capacity, admit_floor=self.admit_floor,
                    touch_k=self.touch_k, ablate=tuple(self.ablate), seed=self.seed)
        base.update(overrides)
        return InferenceConfig(**base)

    def _validate_params(self):
        if self.task_kind not in ("node", "edge"):
            raise ValueError(f"task_kind must be 'node' or 'edge', got {self.task_kind!r}")
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation(s) {sorted(bad)}")

    # ------------------------------------------------------------ fitting

    def fit(self, g, pool: PointPool | None = None, out_dir=None):
        """Pretrain on ``g``; ``pool`` defaults to a split of its labels."""
        self._validate_params()
        g = check_graph(g)
        if pool is None:
            pool = make_point_pool(g, self.task_kind, seed=self.seed)
        state = pretrain(g, pool, self._model_config(g), self._train_config(), out_dir=out_dir)
        self._set_state(state.params, state.model, state.history)
        return self

    def _set_state(self, params: ModelParams, model: ModelConfig, history=()):
        self.params_ = params
        self.model_config_ = model
        self.history_ = list(history)
        self.n_features_in_ = model.feature_dim
        self.cache_ = PromptCache(self.cache_capacity, self.admit_floor, self.touch_k)

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "GraphPrompter":
        state = TrainState.load(path)
        m = state.model
        est = cls(task_kind="edge" if m.reweight_input == "edge" else "node",
                  embedding_dim=m.embedding_dim, gnn_depth=m.gnn_depth,
                  task_rounds=m.task_rounds, temperature=m.temperature, l_hops=m.l_hops,
                  max_subgraph_nodes=m.max_subgraph_nodes, **kwargs)
        est._set_state(state.params, m, state.history)
        return est

    # ------------------------------------------------------------ inference

    def transform(self, g, points) -> np.ndarray:
        """Encoder output for each point, shape (len(points), embedding_dim)."""
        check_is_fitted(self, "params_")
        g = check_graph(g, self.n_features_in_)
        points = check_points(g, points, self.task_kind)
        rng = np.random.default_rng(self.seed)
        emb = embed(sample_batch(g, points, self.model_config_, rng), self.params_,
                    self.model_config_, reweight="no-reweight" not in self.ablate)
        return emb.raw.data.copy()

    def _episode(self, g, candidates, queries):
        check_is_fitted(self, "params_")
        g = check_graph(g, self.n_features_in_)
        cands = check_points(g, candidates, self.task_kind, labelled=True)
        queries = check_points(g, queries, self.task_kind)
        by_class: dict[int, list[InputPoint]] = {}
        for p in cands:
            by_class.setdefault(p.label, []).append(p)
        classes = sorted(by_class)
        if len(classes) < 2:
            raise ValueError("candidates must cover at least two classes")
        icfg = self.inference_config(ways=len(classes))
        walk, select = (np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(2))
        return run_episode(self.params_, self.model_config_, icfg, g, classes, by_class,
                           queries, self.cache_, walk, select)

    def predict_proba(self, g, candidates, queries) -> np.ndarray:
        """Class probabilities, columns in ascending candidate-class order."""
        return self._episode(g, candidates, queries).proba.copy()

    def predict(self, g, candidates, queries) -> np.ndarray:
        """Predicted class of every query given labelled candidate points.

        The prompt cache persists across calls, as in a streaming setting;
        call :meth:`reset_cache` to start fresh.
        """
        return np.asarray(self._episode(g, candidates, queries).pred_classes)

    def reset_cache(self):
        check_is_fitted(self, "params_")
        self.cache_.reset()
        return self

    def score(self, g, pool: PointPool | None = None, class_pool: Iterable[int] | None = None,
              episodes: int = 25) -> float:
        """Mean accuracy over ``episodes`` streamed episodes."""
        check_is_fitted(self, "params_")
        g = check_graph(g, self.n_features_in_)
        if pool is None:
            pool = make_point_pool(g, self.task_kind, seed=self.seed)
        run = run_inference(self.params_, self.model_config_, g, pool,
                            self.inference_config(episodes=episodes), class_pool)
        return evaluate(run)["accuracy"]
