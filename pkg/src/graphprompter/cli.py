"""Command line entry point.

    graphprompter generate --kind sbm --blocks 10 --nodes-per-block 200 --seed 1 --out g.json
    graphprompter pretrain --graph g.json --out runs/pre --steps 1000 --pretrain-classes 0-4
    graphprompter infer --checkpoint runs/pre/final.ckpt --graph g2.json --out runs/inf
    graphprompter sweep --checkpoint ... --graph ... --param cache-size --out runs/sweep
    graphprompter inspect-checkpoint runs/pre/final.ckpt

Every command writes ``config.json`` (the resolved settings) next to its
outputs; ``--print-config`` prints that JSON and exits.  Exit codes: 0 on
success, 2 on usage errors, 1 on runtime errors.  Wall-clock timings go
to ``run.log``, never into the data files (the per-step ``wall_ms`` column
of the pretraining metrics is the one exception).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .graph import (generate_sbm, generate_synthetic_kg, load_graph, make_point_pool,
                    save_graph)
from .inference import ABLATIONS, InferenceConfig, evaluate, run_inference
from .model import ModelConfig
from .nn import load_checkpoint
from .trainer import TrainConfig, TrainState, pretrain

log = logging.getLogger("graphprompter")

SWEEP_DEFAULTS = {
    "cache-size": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
    "shots": [1, 3, 5, 10, 20, 50],
    "hops": [1, 2, 3],
    "ways": [5, 10, 20, 40],
}
RAW_COLUMNS = ["param", "value", "method", "seed", "accuracy", "n", "mean_confidence"]
AGG_COLUMNS = ["param", "value", "method", "mean", "std", "n_seeds"]


class UsageError(Exception):
    """Bad flag values detected after parsing; exits with status 2."""


# ----------------------------------------------------------------- parsing

def int_list(text: str) -> list[int]:
    """Non-negative integers: '5,10,20', '0-19' or a mix like '0-4,9'."""
    out: list[int] = []
    for part in filter(None, (t.strip() for t in text.split(","))):
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if m is None:
            raise argparse.ArgumentTypeError(f"expected integers like '5,10' or '0-19', got {text!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        out.extend(range(lo, hi + 1))
    if not out:
        raise argparse.ArgumentTypeError("empty integer list")
    return out


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--out", required=out_required, help="output file or directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")


def _episode_flags(p: argparse.ArgumentParser):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--task-kind", choices=["node", "edge"], default=None,
                   help="default: edge when the model reweights by relation, else node")
    p.add_argument("--classes", type=int_list, default=None,
                   help="downstream class pool, e.g. 5-9 (default: all classes)")
    p.add_argument("--shots", type=int, default=3)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--queries", type=int, default=4)
    p.add_argument("--episodes", type=int, default=25)
    p.add_argument("--selector", choices=["adaptive", "random"], default="adaptive")
    p.add_argument("--metric", choices=["cosine", "euclidean", "manhattan"], default="cosine")
    p.add_argument("--cache-size", type=int, default=3)
    p.add_argument("--admit-floor", type=float, default=0.5)
    p.add_argument("--touch-k", type=int, default=1)
    p.add_argument("--hops", type=int, default=None, help="override the sampling radius")
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--seeds", type=int_list, default=None,
                   help="episode seeds, e.g. 0-19 (default: --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphprompter", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic graph file")
    _common(p)
    p.add_argument("--kind", choices=["sbm", "kg"], required=True)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--blocks", type=int, help="sbm: number of blocks")
    p.add_argument("--nodes-per-block", type=int, help="sbm: nodes in each block")
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--entities", type=int, help="kg: number of entities")
    p.add_argument("--relations", type=int, help="kg: number of relations")
    p.add_argument("--triples-per-relation", type=int, help="kg: triples for each relation")
    p.add_argument("--clusters", type=int, default=None)

    p = sub.add_parser("pretrain", help="pretrain and write checkpoints plus metrics.csv")
    _common(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--task-kind", choices=["node", "edge"], default="node")
    p.add_argument("--pretrain-classes", type=int_list, default=None)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=3)
    p.add_argument("--queries", type=int, default=4)
    p.add_argument("--batch-episodes", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.add_argument("--gnn-depth", type=int, default=2)
    p.add_argument("--task-rounds", type=int, default=2)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--hops", type=int, default=1)
    p.add_argument("--max-subgraph-nodes", type=int, default=20)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("infer", help="stream downstream episodes; one metrics row per (seed, ways)")
    _common(p)
    _episode_flags(p)
    p.add_argument("--ways", type=int_list, default=[5])

    p = sub.add_parser("sweep", help="per-seed and aggregate accuracy over one parameter")
    _common(p)
    _episode_flags(p)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--param", choices=sorted(SWEEP_DEFAULTS), required=True)
    p.add_argument("--values", type=int_list, default=None)
    p.add_argument("--methods", default=None,
                   help="comma list of selectors (default: both for shots, else --selector)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header summary")
    p.add_argument("path")
    return parser


# ----------------------------------------------------------------- helpers

def _write_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _sidecar(out_dir: Path, msg: str) -> None:
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")


def _check(cond: bool, msg: str):
    if not cond:
        raise UsageError(msg)


# ----------------------------------------------------------------- commands

def _generate_config(a) -> dict:
    if a.kind == "sbm":
        missing = [f for f in ("blocks", "nodes_per_block") if getattr(a, f) is None]
        _check(not missing, "sbm needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
        params = dict(blocks=a.blocks, nodes_per_block=a.nodes_per_block, p_in=a.p_in,
                      p_out=a.p_out)
    else:
        missing = [f for f in ("entities", "relations", "triples_per_relation") if getattr(a, f) is None]
        _check(not missing, "kg needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
        params = dict(num_entities=a.entities, num_relations=a.relations,
                      triples_per_relation=a.triples_per_relation, num_clusters=a.clusters)
    params.update(feature_dim=a.feature_dim, seed=a.seed, noise=a.noise)
    return {"command": "generate", "kind": a.kind, "params": params, "out": a.out}


def cmd_generate(a) -> int:
    cfg = _generate_config(a)
    if a.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    gen = generate_sbm if a.kind == "sbm" else generate_synthetic_kg
    g = gen(**cfg["params"])
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, out)
    (out.parent / (out.name + ".config.json")).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}: {g.num_nodes} nodes, {g.num_edges} edges")
    return 0


def _pretrain_configs(a, feature_dim: int, num_relations: int):
    model = ModelConfig(feature_dim=feature_dim, embedding_dim=a.embedding_dim,
                        num_relations=max(num_relations, 1),
                        reweight_input="edge" if a.task_kind == "edge" else "node",
                        gnn_depth=a.gnn_depth, task_rounds=a.task_rounds,
                        temperature=a.temperature, l_hops=a.hops,
                        max_subgraph_nodes=a.max_subgraph_nodes)
    train = TrainConfig(ways=a.ways, shots=a.shots, queries=a.queries,
                        batch_episodes=a.batch_episodes, steps=a.steps, lr=a.lr,
                        weight_decay=a.weight_decay, seed=a.seed,
                        checkpoint_interval=a.checkpoint_interval,
                        pretrain_classes=None if a.pretrain_classes is None else tuple(a.pretrain_classes))
    return model, train


def cmd_pretrain(a) -> int:
    _check(a.steps >= 0, "--steps must be >= 0")
    g = load_graph(a.graph)
    model, train = _pretrain_configs(a, g.feature_dim, g.num_relations)
    cfg = {"command": "pretrain", "graph": a.graph, "task_kind": a.task_kind,
           "model": model.to_dict(), "train": train.to_dict(), "resume": a.resume, "out": a.out}
    if a.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    out = Path(a.out)
    _write_config(out, cfg)
    pool = make_point_pool(g, a.task_kind, seed=a.seed)
    start = time.perf_counter()
    state = pretrain(g, pool, model, train, out_dir=out, resume=a.resume)
    _sidecar(out, f"pretrain {state.step} steps in {time.perf_counter() - start:.1f}s")
    print(f"wrote {out / 'final.ckpt'} at step {state.step}")
    return 0


def _load_episode_setup(a):
    state = TrainState.load(a.checkpoint)
    model = state.model
    if a.hops is not None:
        _check(a.hops >= 1, "--hops must be >= 1")
        model = ModelConfig(**{**model.to_dict(), "l_hops": a.hops})
    g = load_graph(a.graph)
    _check(g.feature_dim == model.feature_dim,
           f"graph has {g.feature_dim} features, checkpoint expects {model.feature_dim}")
    kind = a.task_kind or ("edge" if model.reweight_input == "edge" else "node")
    pool = make_point_pool(g, kind, seed=0)
    classes = pool.classes if a.classes is None else a.classes
    return state.params, model, g, pool, classes, kind


def _icfg(a, **over) -> InferenceConfig:
    base = dict(ways=5, shots=a.shots, candidates=a.candidates, queries=a.queries,
                episodes=a.episodes, selector=a.selector, metric=a.metric,
                cache_capacity=a.cache_size, admit_floor=a.admit_floor, touch_k=a.touch_k,
                ablate=tuple(a.ablate), seed=a.seed)
    base.update(over)
    return InferenceConfig(**base)


def _validate_episode_flags(a):
    _check(a.cache_size >= 0, "--cache-size must be >= 0")
    _check(a.touch_k >= 1, "--touch-k must be >= 1")
    _check(1 <= a.shots <= a.candidates, "need 1 <= --shots <= --candidates")
    _check(a.episodes >= 1 and a.queries >= 1, "--episodes and --queries must be >= 1")


def cmd_infer(a) -> int:
    _validate_episode_flags(a)
    seeds = a.seeds or [a.seed]
    cfg = {"command": "infer", "checkpoint": a.checkpoint, "graph": a.graph,
           "ways": a.ways, "seeds": seeds, "classes": a.classes, "hops": a.hops,
           "task_kind": a.task_kind, "inference": _icfg(a).to_dict(), "out": a.out}
    if a.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    params, model, g, pool, classes, _ = _load_episode_setup(a)
    for w in a.ways:
        _check(2 <= w <= len(classes), f"--ways {w} needs between 2 and {len(classes)} classes")
    out = Path(a.out)
    _write_config(out, cfg)
    rows = []
    start = time.perf_counter()
    for w in a.ways:
        for s in seeds:
            run = run_inference(params, model, g, pool, _icfg(a, ways=w, seed=s), classes)
            report = evaluate(run)
            sub = out / f"ways{w}_seed{s}"
            sub.mkdir(parents=True, exist_ok=True)
            run.write_records(sub / "records.jsonl")
            (sub / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            rows.append([s, w, repr(report["accuracy"]), report["n"], repr(report["mean_confidence"])])
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "ways", "accuracy", "n", "mean_confidence"])
        wr.writerows(rows)
    if len(rows) == 1:
        shutil.copy(sub / "records.jsonl", out / "records.jsonl")
        shutil.copy(sub / "metrics.json", out / "metrics.json")
    _sidecar(out, f"infer {len(rows)} runs in {time.perf_counter() - start:.1f}s")
    for r in rows:
        print(f"seed={r[0]} ways={r[1]} accuracy={float(r[2]):.4f}")
    return 0


def _sweep_job(job):
    params, model, g, pool, classes, icfg, key = job
    report = evaluate(run_inference(params, model, g, pool, icfg, classes))
    return key, report


def aggregate(raw_rows: list[dict]) -> list[dict]:
    """Mean and sample std (ddof=1, 0 for a single seed) per (param, value, method)."""
    groups: dict[tuple, list[float]] = {}
    for r in raw_rows:
        groups.setdefault((r["param"], int(r["value"]), r["method"]), []).append(float(r["accuracy"]))
    out = []
    for (param, value, method), accs in groups.items():
        arr = np.asarray(accs)
        out.append({"param": param, "value": value, "method": method,
                    "mean": float(arr.mean()),
                    "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                    "n_seeds": len(arr)})
    return out


def cmd_sweep(a) -> int:
    _validate_episode_flags(a)
    values = a.values or SWEEP_DEFAULTS[a.param]
    if a.methods:
        methods = [m.strip() for m in a.methods.split(",") if m.strip()]
        for m in methods:
            _check(m in ("adaptive", "random"), f"unknown method {m!r}")
    else:
        methods = ["adaptive", "random"] if a.param == "shots" else [a.selector]
    seeds = a.seeds or [a.seed]
    _check(a.workers >= 1, "--workers must be >= 1")
    cfg = {"command": "sweep", "checkpoint": a.checkpoint, "graph": a.graph, "param": a.param,
           "values": values, "methods": methods, "seeds": seeds, "classes": a.classes,
           "hops": a.hops, "task_kind": a.task_kind, "inference": _icfg(a, ways=a.ways).to_dict(),
           "out": a.out}
    if a.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    params, model, g, pool, classes, _ = _load_episode_setup(a)
    jobs = []
    for v in values:
        for method in methods:
            m = model
            over = {"ways": a.ways, "selector": method}
            if a.param == "cache-size":
                _check(v >= 0, "cache sizes must be >= 0")
                over["cache_capacity"] = v
            elif a.param == "shots":
                _check(v >= 1, "shots must be >= 1")
                # the candidate pool grows with the budget so k <= N holds
                over.update(shots=v, candidates=max(a.candidates, v))
            elif a.param == "hops":
                _check(v >= 1, "hops must be >= 1")
                m = ModelConfig(**{**model.to_dict(), "l_hops": v})
            elif a.param == "ways":
                over["ways"] = v
            _check(2 <= over["ways"] <= len(classes),
                   f"{over['ways']}-way episodes need at least that many classes ({len(classes)} available)")
            for s in seeds:
                jobs.append((params, m, g, pool, classes, _icfg(a, seed=s, **over), (v, method, s)))
    out = Path(a.out)
    _write_config(out, cfg)
    start = time.perf_counter()
    if a.workers > 1:
        with ProcessPoolExecutor(a.workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    raw = [{"param": a.param, "value": v, "method": method, "seed": s,
            "accuracy": rep["accuracy"], "n": rep["n"], "mean_confidence": rep["mean_confidence"]}
           for (v, method, s), rep in results]
    with open(out / "raw.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, RAW_COLUMNS)
        wr.writeheader()
        for r in raw:
            wr.writerow({**r, "accuracy": repr(r["accuracy"]),
                         "mean_confidence": repr(r["mean_confidence"])})
    agg = aggregate(raw)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, AGG_COLUMNS)
        wr.writeheader()
        for r in agg:
            wr.writerow({**r, "mean": repr(r["mean"]), "std": repr(r["std"])})
    _sidecar(out, f"sweep {len(jobs)} runs in {time.perf_counter() - start:.1f}s")
    for r in agg:
        print(f"{r['param']}={r['value']} {r['method']}: {r['mean']:.4f} +- {r['std']:.4f}")
    return 0


def cmd_inspect(a) -> int:
    ck = load_checkpoint(a.path)
    h = dict(ck.header)
    summary = {k: h[k] for k in ("format_version", "embedding_dim", "num_relations", "rng_seed",
                                 "optimizer_step", "config")}
    summary["step"] = h.get("extra", {}).get("step")
    summary["num_parameters"] = int(sum(ck.params[n].size for n in ck.params))
    summary["tensors"] = {n: list(ck.params[n].shape) for n in ck.params}
    summary["params_sha256"] = ck.params.digest()
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "infer": cmd_infer,
            "sweep": cmd_sweep, "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)      # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if getattr(a, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"graphprompter {a.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:           # runtime failure: message, no traceback
        print(f"graphprompter {a.command}: {type(e).__name__}: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
