"""Command-line front door: ``factnet <command> [options]``.

Machine-readable JSON goes to stdout, human logs to stderr.  Exit codes:
0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PREDICATES, RunConfig
from .nn import CheckpointError
from .scenegen import DatasetParseError, jitter_proposals, read_dataset, write_dataset

log = logging.getLogger("factnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None) is None:
        cfg = RunConfig()
    else:
        try:
            cfg = RunConfig.load(args.config)
        except FileNotFoundError as exc:
            raise DataError(f"config not found: {args.config}") from exc
        except (json.JSONDecodeError, UnicodeDecodeError, ValueError, TypeError) as exc:
            raise DataError(f"malformed config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, gen=replace(cfg.gen, seed=args.seed))
    return cfg


def _read_scenes(path, cfg: RunConfig):
    try:
        scenes = read_dataset(path, cfg.gen)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except DatasetParseError as exc:
        raise DataError(f"{exc} (byte offset {exc.offset})") from exc
    if not scenes:
        raise DataError(f"dataset {path} holds no scenes")
    return scenes


def _load_model(path):
    from .model import FactorizableNet

    try:
        model, _ = FactorizableNet.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (CheckpointError, ValueError, TypeError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    return model


def _ks(text: str) -> list[int]:
    try:
        ks = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError as exc:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from exc
    if not ks or ks[0] <= 0:
        raise UsageError("--k values must be positive")
    return ks


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    scenes = write_dataset(cfg.gen, args.n, args.out, start=args.start)
    _emit(
        {
            "out": str(args.out),
            "n_scenes": len(scenes),
            "n_objects": sum(len(s.objects) for s in scenes),
            "n_relations": sum(len(s.relations) for s in scenes),
        }
    )
    return EXIT_OK


def cmd_factorize(args, cfg: RunConfig) -> int:
    from .graph import factorize_arrays, graph_stats

    scenes = _read_scenes(args.dataset, cfg)
    if not 0 <= args.scene < len(scenes):
        raise DataError(f"scene {args.scene} out of range (dataset has {len(scenes)})")
    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    gen = cfg.gen if args.proposals is None else replace(cfg.gen, n_proposals=args.proposals)
    props = jitter_proposals(scenes[args.scene], gen)
    boxes = np.array([tuple(p.box) for p in props])
    scores = np.array([p.objectness for p in props])
    graph = factorize_arrays(boxes, scores, args.threshold)
    stats = graph_stats(graph).to_json()
    if args.graph_out is not None:
        Path(args.graph_out).write_text(graph.dumps(), encoding="utf-8")
        _emit({"stats": stats, "graph_out": str(args.graph_out)})
    else:
        _emit({"stats": stats, "graph": graph.to_json()})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train

    scenes = _read_scenes(args.data, cfg)
    val = _read_scenes(args.val, cfg) if args.val else []
    tc = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    mc = replace(cfg.model, n_object_classes=cfg.gen.n_object_classes, n_predicates=cfg.gen.n_predicates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(scenes, mc, tc, cfg.gen, val, cfg.eval)
    ckpt = out / "model.ckpt"
    result.model.save(ckpt, {"run": replace(cfg, train=tc, model=mc).to_json()})
    result.write_csv(out / "train_log.csv")
    last = result.log[-1] if result.log else None
    _emit(
        {
            "checkpoint": str(ckpt),
            "log": str(out / "train_log.csv"),
            "epochs": len(result.log),
            "obj_loss": last.obj_loss if last else None,
            "pred_loss": last.pred_loss if last else None,
        }
    )
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evaluate import evaluate

    ks = _ks(args.k)
    modes = ("phrdet", "sggen") if args.mode == "both" else (args.mode,)
    model = _load_model(args.checkpoint)
    scenes = [s for s in _read_scenes(args.data, cfg) if s.relations]
    ecfg = replace(cfg.eval, test_threshold=args.threshold) if args.threshold is not None else cfg.eval
    rep = evaluate(model, scenes, cfg.gen, ks, modes, ecfg)
    rows = []
    for (mode, k), r in sorted(rep.items()):
        row = r.to_json()
        row["per_predicate"] = {PREDICATES[p]: r.predicate_recall(p) for p in sorted(r.per_predicate_total)}
        rows.append(row)
    _emit(rows)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    from .evaluate import bench

    model = _load_model(args.checkpoint)
    scenes = _read_scenes(args.data, cfg)
    if args.limit is not None:
        scenes = scenes[: args.limit]
    res = bench(model, scenes, cfg.gen, args.mode, args.proposals, args.warmup, cfg.eval)
    _emit(res.to_json())
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .checks import run_suite

    outcomes = run_suite(args.seed if args.seed is not None else cfg.seed, args.eps, args.samples)
    worst = max(o.max_rel_error for o in outcomes)
    passed = worst <= args.tol
    for o in outcomes:
        log.info("%-26s %.2e  %s", o.name, o.max_rel_error, "ok" if o.result.passed(args.tol) else "FAIL")
    _emit(
        {
            "passed": passed,
            "tolerance": args.tol,
            "max_rel_error": worst,
            "cases": {o.name: o.max_rel_error for o in outcomes},
        }
    )
    return EXIT_OK if passed else EXIT_CHECK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="factnet", description="Factorized scene-graph pipeline on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", type=Path, help="RunConfig JSON file")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic scene dataset")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--start", type=int, default=0, help="index of the first scene")
    sp.add_argument("--seed", type=int)

    sp = add("factorize", cmd_factorize, "factorize one scene's proposals and print graph statistics")
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--scene", type=int, default=0)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--proposals", type=int, help="number of proposals (default: config)")
    sp.add_argument("--graph-out", type=Path, help="write the graph JSON here instead of stdout")

    sp = add("train", cmd_train, "train a model; writes model.ckpt and train_log.csv")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--val", type=Path, help="validation dataset for per-epoch recall")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--epochs", type=int)

    sp = add("eval", cmd_eval, "Recall@K of a checkpoint on a dataset")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--k", default="50,100")
    sp.add_argument("--mode", choices=("phrdet", "sggen", "both"), default="both")
    sp.add_argument("--threshold", type=float, help="subgraph clustering threshold at test time")

    sp = add("bench", cmd_bench, "single-threaded inference seconds per image")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--mode", choices=("subgraph", "pairwise"), default="subgraph")
    sp.add_argument("--proposals", type=int, default=64)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--limit", type=int, help="use only the first LIMIT scenes")

    sp = add("grad-check", cmd_grad_check, "finite-difference check of every layer and the full model")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eps", type=float, default=3e-3, help="initial step")
    sp.add_argument("--samples", type=int, default=12, help="coordinates per parameter")
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
            force=True,
        )
        cfg = _load_config(args)
        log.info("effective config: %s", cfg.dumps())
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"factnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"factnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"factnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
