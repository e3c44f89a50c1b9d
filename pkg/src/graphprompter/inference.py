"""Downstream in-context inference over a stream of episodes.

Per episode: sample and encode candidate and query data graphs, score
candidates, pick k per class (query voting or uniformly at random), add
cached pseudo-labelled prompts, predict through the task graph, then
update the cache.  Parameters are never modified.

Run records are JSON lines::

    {"episode": 0, "query_id": "17", "y_true": 3, "y_pred": 3,
     "confidence": 0.91, "prompt_ids": ["4", "9", ...], "cache_size": 2}

and the metrics report is ``{"accuracy", "per_class", "n",
"mean_confidence"}``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .augmenter import PromptCache
from .autograd import Tensor
from .graph import EpisodeSpec, Graph, InputPoint, PointPool, draw_classes, split_episode_pool
from .model import ModelConfig, embed, sample_batch
from .nn import ModelParams
from .selector import knn_similarity, random_select, score_matrix, vote_select
from .task_graph import build_task_graph, predict, propagate

ABLATIONS = ("no-reweight", "no-knn", "no-selection-layer", "no-augmenter")


@dataclass(frozen=True)
class InferenceConfig:
    ways: int = 5
    shots: int = 3
    candidates: int = 10
    queries: int = 4
    episodes: int = 25
    selector: str = "adaptive"       # "adaptive" | "random"
    metric: str = "cosine"
    cache_capacity: int = 3
    admit_floor: float = 0.5
    touch_k: int = 1
    ablate: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.selector not in ("adaptive", "random"):
            raise ValueError(f"selector must be 'adaptive' or 'random', got {self.selector!r}")
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")

    @property
    def spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.ways, self.shots, self.candidates, self.queries)

    @property
    def cache_enabled(self) -> bool:
        return self.cache_capacity > 0 and "no-augmenter" not in self.ablate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d


@dataclass
class QueryRecord:
    episode: int
    query_id: str
    y_true: int
    y_pred: int
    confidence: float
    prompt_ids: list[str]
    cache_size: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class InferenceRun:
    model: ModelConfig
    config: InferenceConfig
    params_digest: str
    records: list[QueryRecord] = field(default_factory=list)

    def write_records(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(r.to_json() + "\n" for r in self.records))
        return path


@dataclass
class EpisodeOutcome:
    classes: tuple[int, ...]
    candidate_ids: list[str]
    chosen_rows: list[int]
    prompt_ids: list[str]
    pred_classes: list[int]
    confidence: np.ndarray
    proba: np.ndarray


def run_episode(params: ModelParams, model: ModelConfig, icfg: InferenceConfig, g: Graph,
                classes: Sequence[int], candidates: Mapping[int, Sequence[InputPoint]],
                queries: Sequence[InputPoint], cache: PromptCache,
                walk_rng: np.random.Generator, select_rng: np.random.Generator) -> EpisodeOutcome:
    """One downstream episode; mutates only ``cache``."""
    classes = tuple(int(c) for c in classes)
    slot = {c: i for i, c in enumerate(classes)}
    cand_points = [p for c in classes for p in candidates[c]]
    cand_class = [c for c in classes for _ in candidates[c]]
    points = cand_points + list(queries)
    P = len(cand_points)

    emb = embed(sample_batch(g, points, model, walk_rng), params, model,
                reweight="no-reweight" not in icfg.ablate)
    raw = emb.raw.data
    adaptive = icfg.selector == "adaptive"
    if not adaptive or "no-selection-layer" in icfg.ablate:
        imp = np.ones(len(points))
    else:
        imp = emb.importance.data
    # the random (baseline) path feeds plain embeddings, so it never touches importance_mlp
    feats = raw * imp[:, None] if adaptive else raw

    if adaptive:
        sim = knn_similarity(feats[:P], feats[P:], icfg.metric)
        if "no-knn" in icfg.ablate:
            sim = np.zeros_like(sim)
        sel = vote_select(score_matrix(sim, imp[:P], imp[P:]), cand_class, icfg.shots)
    else:
        sel = random_select(cand_class, icfg.shots, select_rng)
    chosen = [r for c in classes for r in sel.chosen[c]]

    prompts = [(feats[r], slot[cand_class[r]]) for r in chosen]
    prompt_ids = [cand_points[r].key for r in chosen]
    if icfg.cache_enabled:
        for e in cache.entries:
            if e.label in slot:
                prompts.append((e.embedding, slot[e.label]))
                prompt_ids.append(f"cache:{e.key}")

    q_feats = feats[P:]
    data = np.concatenate([np.stack([p for p, _ in prompts]), q_feats], axis=0)
    tg = build_task_graph([s for _, s in prompts], len(queries), len(classes))
    H = propagate(tg, Tensor(data), params, model.task_rounds)
    out = predict(tg, H, model.temperature)
    pred_classes = [classes[s] for s in out.pred]

    if icfg.cache_enabled:
        cache.touch(q_feats, icfg.touch_k)
        cache.admit_batch(q_feats, pred_classes, out.confidence.tolist(),
                          [q.key for q in queries])
    return EpisodeOutcome(classes, [p.key for p in cand_points], chosen, prompt_ids,
                          pred_classes, out.confidence, out.proba)


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def run_inference(params: ModelParams, model: ModelConfig, g: Graph, pool: PointPool,
                  icfg: InferenceConfig, class_pool: Iterable[int] | None = None) -> InferenceRun:
    """Stream ``icfg.episodes`` downstream episodes through one cache.

    Episode draws and data-graph walks use their own RNG streams, so two runs
    with the same seed see identical episodes whatever the selector.
    """
    class_pool = sorted(pool.classes if class_pool is None else class_pool)
    episode_rng, walk_rng, select_rng = _streams(icfg.seed)
    cache = PromptCache(icfg.cache_capacity, icfg.admit_floor, icfg.touch_k)
    run = InferenceRun(model, icfg, params.digest())
    for e in range(icfg.episodes):
        classes = draw_classes(class_pool, icfg.ways, episode_rng)
        cands, queries = split_episode_pool(pool, icfg.spec.with_classes(classes), episode_rng)
        size = len(cache)
        out = run_episode(params, model, icfg, g, classes, cands, queries, cache,
                          walk_rng, select_rng)
        for q, yp, conf in zip(queries, out.pred_classes, out.confidence):
            run.records.append(QueryRecord(e, q.key, q.label, int(yp), float(conf),
                                           list(out.prompt_ids), size))
    return run


def evaluate(run: InferenceRun | Sequence[QueryRecord]) -> dict:
    records = run.records if isinstance(run, InferenceRun) else list(run)
    if not records:
        raise ValueError("cannot evaluate an empty run")
    correct = np.array([r.y_true == r.y_pred for r in records])
    per_class: dict[str, float] = {}
    for c in sorted({r.y_true for r in records}):
        mask = np.array([r.y_true == c for r in records])
        per_class[str(c)] = float(correct[mask].mean())
    return {
        "accuracy": float(correct.mean()),
        "per_class": per_class,
        "n": len(records),
        "mean_confidence": float(np.mean([r.confidence for r in records])),
    }


def paired_report(a: Mapping[int, float], b: Mapping[int, float]) -> dict:
    """Per-seed accuracy deltas a - b for seeds present in both."""
    seeds = sorted(set(a) & set(b))
    if not seeds:
        raise ValueError("no common seeds to pair")
    deltas = {s: a[s] - b[s] for s in seeds}
    return {"deltas": deltas, "mean_delta": float(np.mean(list(deltas.values()))),
            "wins": int(sum(d > 0 for d in deltas.values())),
            "losses": int(sum(d < 0 for d in deltas.values())), "n": len(seeds)}
