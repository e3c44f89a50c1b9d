"""Pretraining on neighbor-matching and multi-task episodes.

The step loss is the mean cross-entropy over neighbor-matching queries plus
the mean cross-entropy over multi-task queries.  During training every
prompt enters the task graph scaled by its learned importance.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .graph import (EpisodeSpec, Graph, InputPoint, InsufficientDataError, PointPool,
                    draw_classes, split_episode_pool)
from .model import ModelConfig, embed, init_params, sample_batch
from .nn import AdamW, AdamWState, ModelParams, load_checkpoint, save_checkpoint
from .task_graph import build_task_graph, merge, propagate, query_logits

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss_total", "loss_nm", "loss_mt", "acc_nm", "acc_mt", "wall_ms"]


@dataclass(frozen=True)
class Episode:
    task: str                         # "NM" or "MT"
    classes: tuple[int, ...]          # class id (MT) or anchor node id (NM) per slot
    prompts: tuple[InputPoint, ...]
    prompt_slots: tuple[int, ...]
    queries: tuple[InputPoint, ...]
    query_slots: tuple[int, ...]

    def __post_init__(self):
        m = len(self.classes)
        if m < 2:
            raise ValueError(f"an episode needs at least 2 classes, got {m}")
        if set(self.prompt_slots) != set(range(m)):
            raise ValueError("prompts must cover every episode class")
        if any(not 0 <= s < m for s in self.query_slots):
            raise ValueError("query slot outside the episode classes")

    @property
    def ways(self) -> int:
        return len(self.classes)

    def describe(self) -> str:
        return f"{self.task}{list(self.classes)}"


def _ball(g: Graph, i: int, hops: int) -> set[int]:
    seen = {i}
    frontier = [i]
    for _ in range(hops):
        nxt = []
        for u in frontier:
            for v in g.neighbor_indices(u).tolist():
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    seen.discard(i)
    return seen


def sample_nm_episode(g: Graph, spec: EpisodeSpec, rng: np.random.Generator,
                      max_retries: int = 50) -> Episode:
    """Neighbor matching: class i is the l-hop neighborhood of anchor i.

    Nodes inside more than one chosen neighborhood are dropped; prompts and
    queries are disjoint node sets.
    """
    eligible = np.flatnonzero(g.degrees >= spec.k + 1)
    if len(eligible) < spec.m:
        raise InsufficientDataError(
            f"only {len(eligible)} nodes have degree >= {spec.k + 1}; need {spec.m} anchors")
    for _ in range(max_retries):
        anchors = rng.choice(eligible, size=spec.m, replace=False)
        balls = [_ball(g, int(a), spec.l) for a in anchors]
        counts: dict[int, int] = {}
        for b in balls:
            for v in b:
                counts[v] = counts.get(v, 0) + 1
        anchor_set = set(int(a) for a in anchors)
        own = [sorted(v for v in b if counts[v] == 1 and v not in anchor_set) for b in balls]
        if min(len(o) for o in own) < spec.k + 1:
            continue
        prompts, pslots, rest = [], [], []
        for slot, members in enumerate(own):
            order = rng.permutation(len(members))
            prompts += [members[j] for j in order[:spec.k]]
            pslots += [slot] * spec.k
            rest += [(members[j], slot) for j in order[spec.k:]]
        picks = rng.choice(len(rest), size=min(spec.n, len(rest)), replace=False)
        queries = [rest[j] for j in picks]
        ids = g.node_ids
        return Episode(
            "NM", tuple(int(ids[a]) for a in anchors),
            tuple(InputPoint("node", (int(ids[v]),), s) for v, s in zip(prompts, pslots)),
            tuple(pslots),
            tuple(InputPoint("node", (int(ids[v]),), s) for v, s in queries),
            tuple(s for _, s in queries))
    raise InsufficientDataError(f"no feasible neighbor-matching anchors after {max_retries} tries")


def sample_mt_episode(pool: PointPool, spec: EpisodeSpec, rng: np.random.Generator,
                      class_pool: Sequence[int] | None = None) -> Episode:
    """Supervised episode from the train partition of the pretraining classes."""
    class_pool = list(pool.classes if class_pool is None else class_pool)
    classes = draw_classes(class_pool, spec.m, rng)
    cands, queries = split_episode_pool(pool, spec.with_classes(classes), rng, partition="train")
    slot = {c: i for i, c in enumerate(classes)}
    prompts, pslots = [], []
    for c in classes:
        chosen = cands[c][:spec.k]
        prompts += chosen
        pslots += [slot[c]] * len(chosen)
    return Episode("MT", classes, tuple(prompts), tuple(pslots),
                   tuple(queries), tuple(slot[q.label] for q in queries))


@dataclass
class TrainConfig:
    ways: int = 5
    shots: int = 3
    queries: int = 4
    batch_episodes: int = 4          # per task, per step
    steps: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0     # 0: final checkpoint only
    pretrain_classes: tuple[int, ...] | None = None
    tasks: tuple[str, ...] = ("NM", "MT")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pretrain_classes"] = None if self.pretrain_classes is None else list(self.pretrain_classes)
        d["tasks"] = list(self.tasks)
        return d


@dataclass
class StepResult:
    step: int
    loss_total: float
    loss_nm: float
    loss_mt: float
    acc_nm: float
    acc_mt: float
    wall_ms: float

    def row(self) -> list:
        return [self.step, repr(self.loss_total), repr(self.loss_nm), repr(self.loss_mt),
                repr(self.acc_nm), repr(self.acc_mt), f"{self.wall_ms:.1f}"]


@dataclass
class TrainState:
    params: ModelParams
    model: ModelConfig
    train: TrainConfig
    optimizer: AdamW
    opt_state: AdamWState
    rng: np.random.Generator
    step: int = 0
    history: list[StepResult] = field(default_factory=list)

    @classmethod
    def create(cls, model: ModelConfig, train: TrainConfig) -> "TrainState":
        params = init_params(model, train.seed)
        opt = AdamW(lr=train.lr, weight_decay=train.weight_decay)
        return cls(params, model, train, opt, opt.init_state(params),
                   np.random.default_rng(train.seed))

    def save(self, path) -> Path:
        return save_checkpoint(
            path, self.params, embedding_dim=self.model.embedding_dim,
            num_relations=self.model.num_relations, rng_seed=self.train.seed,
            config={"model": self.model.to_dict(), "train": self.train.to_dict()},
            optimizer=self.opt_state,
            extra={"step": self.step, "rng_state": self.rng.bit_generator.state})

    @classmethod
    def load(cls, path) -> "TrainState":
        ck = load_checkpoint(path)
        model = ModelConfig(**ck.header["config"]["model"])
        tcfg = dict(ck.header["config"]["train"])
        if tcfg.get("pretrain_classes") is not None:
            tcfg["pretrain_classes"] = tuple(tcfg["pretrain_classes"])
        tcfg["tasks"] = tuple(tcfg["tasks"])
        train = TrainConfig(**tcfg)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.header["extra"]["rng_state"]
        opt = AdamW(lr=train.lr, weight_decay=train.weight_decay)
        return cls(ck.params, model, train, opt, ck.optimizer or opt.init_state(ck.params), rng,
                   step=int(ck.header["extra"]["step"]))


def episode_loss(g: Graph, episodes: Sequence[Episode], params: ModelParams,
                 cfg: ModelConfig, rng: np.random.Generator):
    """Forward pass over a batch of episodes on one graph.

    Returns ``(loss, parts)`` where ``parts`` maps task -> (loss tensor,
    accuracy) for every task present in the batch.
    """
    points, tgs = [], []
    for ep in episodes:
        points += list(ep.prompts) + list(ep.queries)
        tgs.append(build_task_graph(ep.prompt_slots, len(ep.queries), ep.ways))
    tg = merge(tgs)
    emb = embed(sample_batch(g, points, cfg, rng), params, cfg)
    H = propagate(tg, emb.weighted, params, cfg.task_rounds)
    logits = query_logits(tg, H, cfg.temperature)
    parts = {}
    row = 0
    rows: dict[str, list[int]] = {}
    targets: dict[str, list[int]] = {}
    for ep in episodes:
        nq = len(ep.queries)
        rows.setdefault(ep.task, []).extend(range(row, row + nq))
        targets.setdefault(ep.task, []).extend(ep.query_slots)
        row += nq
    total = None
    for task in sorted(rows):
        sub = ag.gather(logits, rows[task])
        loss = ag.softmax_cross_entropy(sub, targets[task])
        acc = float(np.mean(np.argmax(sub.data, axis=1) == np.asarray(targets[task])))
        parts[task] = (loss, acc)
        total = loss if total is None else ag.add(total, loss)
    return total, parts


def sample_step_episodes(state: TrainState, g: Graph, pool: PointPool | None) -> list[Episode]:
    t = state.train
    spec = EpisodeSpec(m=t.ways, k=t.shots, N=t.shots, n=t.queries, l=state.model.l_hops)
    eps = []
    for task in t.tasks:
        for _ in range(t.batch_episodes):
            if task == "NM":
                eps.append(sample_nm_episode(g, spec, state.rng))
            elif task == "MT":
                if pool is None:
                    raise ValueError("multi-task episodes need a labelled point pool")
                eps.append(sample_mt_episode(pool, spec, state.rng, t.pretrain_classes))
            else:
                raise ValueError(f"unknown pretraining task {task!r}")
    return eps


def train_step(state: TrainState, g: Graph, episodes: Sequence[Episode]) -> StepResult:
    start = time.perf_counter()
    with ag.Tape() as tape:
        loss, parts = episode_loss(g, episodes, state.params, state.model, state.rng)
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss at step {state.step + 1}; episodes: "
            + ", ".join(ep.describe() for ep in episodes))
    grads = tape.backward(loss, state.params.tensors())
    state.optimizer.step(state.params, dict(zip(state.params.names(), grads)), state.opt_state)
    state.step += 1
    nm = parts.get("NM", (None, float("nan")))
    mt = parts.get("MT", (None, float("nan")))
    res = StepResult(state.step, value,
                     nm[0].item() if nm[0] is not None else 0.0,
                     mt[0].item() if mt[0] is not None else 0.0,
                     nm[1], mt[1], 1000 * (time.perf_counter() - start))
    state.history.append(res)
    return res


def pretrain(g: Graph, pool: PointPool | None, model: ModelConfig, train: TrainConfig,
             out_dir=None, resume: str | Path | None = None,
             until: int | None = None) -> TrainState:
    """Run (or resume) training up to ``until`` (default ``train.steps``).

    With ``out_dir`` set, writes ``metrics.csv`` (appended per step),
    ``step_XXXXXX.ckpt`` every ``checkpoint_interval`` steps and
    ``final.ckpt`` at the end.
    """
    state = TrainState.load(resume) if resume else TrainState.create(model, train)
    until = state.train.steps if until is None else until
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        fresh = not metrics.exists() or resume is None
        fh = open(metrics, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    try:
        while state.step < until:
            res = train_step(state, g, sample_step_episodes(state, g, pool))
            if writer is not None:
                writer.writerow(res.row())
                fh.flush()
            if res.step % 100 == 0:
                log.info("step %d loss %.4f (nm %.4f, mt %.4f) acc_mt %.3f", res.step,
                         res.loss_total, res.loss_nm, res.loss_mt, res.acc_mt)
            interval = state.train.checkpoint_interval
            if out is not None and interval and res.step % interval == 0:
                state.save(out / f"step_{res.step:06d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        state.save(out / "final.ckpt")
    return state
