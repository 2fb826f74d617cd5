"""Command-line entry point.

Subcommands: meta-train, adapt, active, bench, sweep, export, serve.
Exit codes: 0 success, 1 runtime failure, 2 usage error. User errors print a
message, never a stack trace.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import tensor as T
from .active import ActiveConfig, active_loop, export_query_log, oracle_labeler
from .bench import (
    MethodConfig,
    default_grid,
    load_run,
    make_world,
    run_method,
    save_run,
    sweep_training_size,
)
from .meta import MetaConfig, TrainingError, adapt_and_eval, load_state, meta_train
from .tasks import AugmentationConfig

__all__ = ["main"]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return json.load(fh)


def _meta_config(cfg: dict, desk_scale: bool) -> MetaConfig:
    section = dict(cfg.get("meta", {}))
    aug = section.pop("augmentation", None)
    if aug is not None:
        section["augmentation"] = AugmentationConfig(**aug)
    if desk_scale:
        return MetaConfig.desk_scale(**section)
    return MetaConfig(**section)


def _world(cfg: dict, seed: int, desk_scale: bool, **extra):
    section = dict(cfg.get("synthetic", {}))
    section.update(extra)
    if "patch" in section:
        section["patch"] = tuple(section["patch"])
    return make_world(seed=seed, meta_config=_meta_config(cfg, desk_scale),
                      **section)


def _cmd_meta_train(args) -> int:
    cfg = _load_config(args.config)
    world = _world(cfg, args.seed, args.desk_scale)
    os.makedirs(args.out_dir, exist_ok=True)
    meta_cfg = dataclasses.replace(
        _meta_config(cfg, args.desk_scale),
        augmentation=world.meta_config.augmentation,
    )
    meta_train(
        world.model, world.meta_tasks, meta_cfg, seed=args.seed,
        log_path=os.path.join(args.out_dir, "training_log.csv"),
        checkpoint_dir=os.path.join(args.out_dir, "checkpoints"),
    )
    print(f"meta-training finished; artifacts in {args.out_dir}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = _load_config(args.config)
    world = _world(cfg, args.seed, args.desk_scale)
    state = load_state(args.state_dir)
    task = world.real_tasks[args.task]
    rng = np.random.default_rng(args.seed)
    sup = rng.choice(task.train_idx, size=args.budget, replace=False)
    curve = adapt_and_eval(world.model, state.params, task,
                           task.patches[sup], task.labels[sup], steps=args.steps)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "adaptation_curve.csv")
    with open(out, "w") as fh:
        fh.write("step,accuracy\n")
        for s, acc in enumerate(curve):
            fh.write(f"{s},{acc:.12g}\n")
    print(f"adaptation curve written to {out}")
    return 0


def _cmd_active(args) -> int:
    cfg = _load_config(args.config)
    world = _world(cfg, args.seed, args.desk_scale)
    state = load_state(args.state_dir)
    task = world.real_tasks[args.task]
    acfg = ActiveConfig(budget=args.budget, **cfg.get("active", {}))
    metrics, pool, _ = active_loop(world.model, state.params, task, acfg,
                                   oracle_labeler(task), seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    export_query_log(pool, os.path.join(args.out_dir, "query_log.csv"))
    with open(os.path.join(args.out_dir, "active_metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1)
    print(f"active loop done: accuracy {metrics['accuracy']:.4f}, "
          f"{metrics['labeled']} labels; artifacts in {args.out_dir}")
    return 0


def _cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    world = _world(cfg, args.seed, args.desk_scale)
    budget = cfg.get("grid", {}).get("budget", "10%")
    for mc in default_grid(seed=args.seed, budget=budget):
        if args.methods and mc.method not in args.methods:
            continue
        result = run_method(mc, world)
        run_dir = os.path.join(args.out_dir, f"{mc.method}-seed{args.seed}")
        save_run(result, run_dir)
        print(f"{mc.method}: accuracy {result.aggregate['mean']:.4f} "
              f"-> {run_dir}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    world = _world(cfg, args.seed, args.desk_scale)
    sizes = [s if s.endswith("%") else int(s) for s in args.sizes]
    rows = sweep_training_size(args.method, sizes, world)
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, f"sweep_{args.method}.csv")
    with open(out, "w") as fh:
        fh.write("size,accuracy_mean,accuracy_std\n")
        for size, result in rows:
            agg = result.aggregate
            fh.write(f"{size},{agg['mean']:.12g},{agg.get('std', 0.0):.12g}\n")
    print(f"sweep written to {out}")
    return 0


def _cmd_export(args) -> int:
    artifacts = load_run(args.run_dir)
    if args.format != "csv":
        raise T.ParameterError(f"unknown export format {args.format!r}")
    sys.stdout.write(artifacts["metrics"])
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(config_path=args.config, seed=args.seed,
                     desk_scale=args.desk_scale, state_dir=args.state_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agile",
        description="Meta-learning with task augmentation and "
                    "uncertainty-driven labeling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, state=False):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="results/run")
        p.add_argument("--desk-scale", action="store_true",
                       help="small fast profile")
        if state:
            p.add_argument("--state-dir", required=True,
                           help="meta-training state directory")

    p = sub.add_parser("meta-train", help="meta-train on synthetic base tasks")
    common(p)
    p.set_defaults(func=_cmd_meta_train)

    p = sub.add_parser("adapt", help="adapt a trained model to one real task")
    common(p, state=True)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--budget", type=int, default=16)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("active", help="uncertainty-driven labeling loop")
    common(p, state=True)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--budget", type=int, default=16)
    p.set_defaults(func=_cmd_active)

    p = sub.add_parser("bench", help="run the method comparison grid")
    common(p)
    p.add_argument("--methods", nargs="*", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep", help="training-size sweep for one method")
    common(p)
    p.add_argument("--method", default="agile_phase2")
    p.add_argument("--sizes", nargs="+", default=["1%", "10%"])
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export", help="print exported metrics of a prior run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", default="csv")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("serve", help="start the annotation HTTP service")
    common(p)
    p.add_argument("--state-dir", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2
    except (T.ParameterError, T.ShapeError, T.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
