"""Benchmark harness: the comparison grid of training methods, per-task
classification metrics with confidence intervals, adaptation curves, the
training-size sweep, and deterministic result export.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .active import ActiveConfig, active_loop, oracle_labeler
from .meta import (
    MetaConfig,
    MetaState,
    baseline_transfer,
    baseline_vanilla,
    evaluate_accuracy,
    inner_adapt,
    meta_train,
    predict_labels,
)
from .model import ConvClassifier, ModelConfig, Params
from .tasks import AugmentationConfig, Episode, TaskDataset, generate_synthetic_task

__all__ = [
    "Metrics",
    "MethodConfig",
    "RunResult",
    "World",
    "compute_metrics",
    "confidence_interval",
    "resolve_budget",
    "default_grid",
    "make_world",
    "run_method",
    "sweep_training_size",
    "save_run",
    "load_run",
]

METHODS = (
    "vanilla_limit",
    "vanilla_full",
    "transfer",
    "maml",
    "agile_phase1",
    "agile_phase2",
)

# per-method (gradient updates, meta-task source) shapes
_GRID_SHAPE = {
    "vanilla_limit": (100, "none"),
    "vanilla_full": (100, "none"),
    "transfer": (100, "base"),
    "maml": (1, "base"),
    "agile_phase1": (1, "augmented"),
    "agile_phase2": (1, "augmented"),
}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Binary-classification metrics; positive class = label 1. When a
    denominator is zero the value is 0.0 and the matching *_defined flag is
    False (never silently NaN)."""

    precision: float
    recall: float
    f1: float
    accuracy: float
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_metrics(predictions, labels) -> Metrics:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.size == 0 or lab.size == 0:
        raise T.ParameterError("compute_metrics needs non-empty inputs")
    if pred.shape != lab.shape:
        raise T.ShapeError(
            f"predictions {pred.shape} vs labels {lab.shape} length mismatch"
        )
    if not set(np.unique(pred)) <= {0, 1} or not set(np.unique(lab)) <= {0, 1}:
        raise T.DataError("compute_metrics expects binary 0/1 vectors")
    tp = int(np.sum((pred == 1) & (lab == 1)))
    fp = int(np.sum((pred == 1) & (lab == 0)))
    fn = int(np.sum((pred == 0) & (lab == 1)))
    tn = int(np.sum((pred == 0) & (lab == 0)))
    p_def, r_def = tp + fp > 0, tp + fn > 0
    precision = tp / (tp + fp) if p_def else 0.0
    recall = tp / (tp + fn) if r_def else 0.0
    f_def = p_def and r_def and (precision + recall) > 0
    f1 = 2 * precision * recall / (precision + recall) if f_def else 0.0
    accuracy = (tp + tn) / (tp + fp + fn + tn)
    return Metrics(precision, recall, f1, accuracy, p_def, r_def, f_def)


def confidence_interval(values) -> dict:
    """Mean, std and normal-approximation 95% CI over independent runs.
    With fewer than 2 values the CI is omitted (single-point report)."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise T.ParameterError("confidence_interval needs at least one value")
    out = {"mean": float(vals.mean()), "n": int(vals.size)}
    if vals.size >= 2:
        std = float(vals.std(ddof=1))
        half = 1.96 * std / math.sqrt(vals.size)
        out["std"] = std
        out["ci95"] = (out["mean"] - half, out["mean"] + half)
    return out


# ---------------------------------------------------------------------------
# method grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodConfig:
    method: str
    n_train: object = 16  # sample count, or a percent string like "1%"
    gradient_updates: int = 1
    meta_task_source: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise T.ParameterError(
                f"unknown method {self.method!r}; expected one of {METHODS}"
            )
        updates, source = _GRID_SHAPE[self.method]
        if self.gradient_updates != updates or self.meta_task_source != source:
            raise T.ParameterError(
                f"{self.method} expects (updates={updates}, meta={source!r}), "
                f"got (updates={self.gradient_updates}, "
                f"meta={self.meta_task_source!r})"
            )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_grid(seed: int = 0, budget: object = "1%") -> list:
    """One MethodConfig per comparison row, sharing a budget and seed."""
    rows = []
    for method in METHODS:
        updates, source = _GRID_SHAPE[method]
        n = "100%" if method == "vanilla_full" else budget
        rows.append(MethodConfig(method, n, updates, source, seed))
    return rows


def resolve_budget(n_train, pool_size: int) -> int:
    """Percent budgets resolve against the train pool with floor rounding
    and a minimum of 2 (one seed sample per class)."""
    if isinstance(n_train, str):
        if not n_train.endswith("%"):
            raise T.ParameterError(f"budget string must end in %, got {n_train!r}")
        pct = float(n_train[:-1]) / 100.0
        budget = max(2, int(math.floor(pct * pool_size)))
    else:
        budget = int(n_train)
    if not 2 <= budget <= pool_size:
        raise T.ParameterError(
            f"budget {budget} outside [2, pool size {pool_size}]"
        )
    return budget


# ---------------------------------------------------------------------------
# world: model + tasks + cached meta-training
# ---------------------------------------------------------------------------

@dataclass
class World:
    model: ConvClassifier
    meta_tasks: list
    real_tasks: list
    meta_config: MetaConfig
    seed: int
    mc_passes: int = 10
    _meta_cache: dict = field(default_factory=dict)

    def meta_state(self, source: str) -> MetaState | None:
        """Meta-train once per source ('base' or 'augmented') and cache."""
        if source == "none":
            return None
        if source not in ("base", "augmented"):
            raise T.ParameterError(f"unknown meta task source {source!r}")
        if source not in self._meta_cache:
            aug = (self.meta_config.augmentation if source == "augmented"
                   else AugmentationConfig(0.0, 0.0, 0.0))
            cfg = dataclasses.replace(self.meta_config, augmentation=aug)
            self._meta_cache[source] = meta_train(
                self.model, self.meta_tasks, cfg, seed=self.seed
            )
        return self._meta_cache[source]


def make_world(
    seed: int = 0,
    n_meta: int = 3,
    n_real: int = 10,
    patch: tuple = (32, 32, 7),
    samples_per_task: int = 400,
    meta_config: MetaConfig | None = None,
    mc_passes: int = 10,
) -> World:
    """Synthetic evaluation world. Meta tasks key on the first ``n_meta``
    channels; real tasks key on held-out channels, so the channel-shuffle
    augmentation is what lets a meta-learner transfer."""
    h, w, c = patch
    if n_meta >= c:
        raise T.ParameterError(f"need n_meta < channels, got {n_meta} vs {c}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    meta_tasks = [
        generate_synthetic_task(rng, h=h, w=w, c=c, signal_channel=i,
                                q=samples_per_task, task_id=f"meta-{i}")
        for i in range(n_meta)
    ]
    real_tasks = [
        generate_synthetic_task(
            rng, h=h, w=w, c=c,
            signal_channel=n_meta + (i % (c - n_meta)),
            q=samples_per_task, task_id=f"real-{i}",
        )
        for i in range(n_real)
    ]
    model = ConvClassifier(ModelConfig(input_shape=patch))
    cfg = meta_config or MetaConfig.desk_scale(
        eval_every=10 ** 9, checkpoint_every=10 ** 9
    )
    return World(model, meta_tasks, real_tasks, cfg, seed, mc_passes)


# ---------------------------------------------------------------------------
# running one method
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: MethodConfig
    per_task: list  # Metrics per real task
    aggregate: dict  # accuracy mean/std/ci95 across tasks
    curves: list  # adaptation curves (meta methods), [] otherwise
    wallclock: float  # seconds; exported to a sidecar, not the result files


def _random_support(task: TaskDataset, budget: int,
                    rng: np.random.Generator) -> np.ndarray:
    return rng.choice(task.train_idx, size=budget, replace=False)


def _adapt(model, theta: Params, x, y, steps: int, alpha: float = 0.01) -> Params:
    episode = Episode(x, y, x[:0], y[:0], 0, np.array([]), np.array([]))
    current = theta
    for _ in range(steps):
        sink: dict = {}
        current, _ = inner_adapt(model, current, episode, alpha, 1,
                                 stats_sink=sink)
        current = current.replace(sink)
    return current


def _adaptation_curve(model, theta: Params, task: TaskDataset, x, y,
                      steps: int = 10) -> list:
    test_x, test_y = task.test_data()
    curve = [evaluate_accuracy(model, theta, test_x, test_y)]
    current = theta
    for _ in range(steps):
        current = _adapt(model, current, x, y, 1)
        curve.append(evaluate_accuracy(model, current, test_x, test_y))
    return curve


def run_method(config: MethodConfig, world: World, curve_steps: int = 10) -> RunResult:
    """Evaluate one grid row on every real task of the world."""
    t0 = time.perf_counter()
    model = world.model
    state = world.meta_state(config.meta_task_source)
    per_task, curves = [], []
    for t_idx, task in enumerate(world.real_tasks):
        budget = resolve_budget(config.n_train, len(task.train_idx))
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, 7919, t_idx])
        )
        test_x, test_y = task.test_data()
        if config.method in ("vanilla_limit", "vanilla_full"):
            sup = _random_support(task, budget, rng)
            _, preds = baseline_vanilla(
                model, task, task.patches[sup], task.labels[sup],
                updates=config.gradient_updates, seed=config.seed + t_idx,
            )
        elif config.method == "transfer":
            sup = _random_support(task, budget, rng)
            _, preds = baseline_transfer(
                model, world.meta_tasks, task,
                task.patches[sup], task.labels[sup],
                finetune_updates=config.gradient_updates,
                seed=config.seed + t_idx,
            )
        elif config.method in ("maml", "agile_phase1"):
            sup = _random_support(task, budget, rng)
            sx, sy = task.patches[sup], task.labels[sup]
            phi = _adapt(model, state.params, sx, sy, config.gradient_updates)
            preds = predict_labels(model, phi, test_x)
            curves.append(_adaptation_curve(model, state.params, task, sx, sy,
                                            curve_steps))
        elif config.method == "agile_phase2":
            acfg = ActiveConfig(
                budget=budget, t_passes=world.mc_passes,
                query_batch=max(2, budget // 8),
                adapt_steps=config.gradient_updates,
            )
            _, pool, _ = active_loop(
                model, state.params, task, acfg, oracle_labeler(task),
                seed=config.seed * 1000 + t_idx,
            )
            ids = [i for i, _ in pool.labeled]
            ys = np.array([y for _, y in pool.labeled])
            sx, sy = task.patches[ids], ys
            phi = _adapt(model, state.params, sx, sy, config.gradient_updates)
            preds = predict_labels(model, phi, test_x)
            curves.append(_adaptation_curve(model, state.params, task, sx, sy,
                                            curve_steps))
        else:  # pragma: no cover - guarded by MethodConfig validation
            raise T.ParameterError(f"unhandled method {config.method!r}")
        per_task.append(compute_metrics(preds, test_y))
    aggregate = confidence_interval([m.accuracy for m in per_task])
    return RunResult(config, per_task, aggregate, curves,
                     time.perf_counter() - t0)


def sweep_training_size(method: str, sizes: list, world: World,
                        curve_steps: int = 0) -> list:
    """One run per budget with the meta-trained weights shared across sizes.
    Returns [(size, RunResult)] in the given order."""
    rows = []
    updates, source = _GRID_SHAPE[method]
    for size in sizes:
        cfg = MethodConfig(method, size, updates, source, world.seed)
        rows.append((size, run_method(cfg, world, curve_steps=curve_steps)))
    return rows


# ---------------------------------------------------------------------------
# result export
# ---------------------------------------------------------------------------

def save_run(result: RunResult, out_dir: str) -> None:
    """results/<run-id>/{config.json, metrics.csv, curves.csv, checkpoints/};
    wall-clock goes to timing.json so the result files stay seed-deterministic."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(result.config.as_dict(), fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        cols = ["task", "precision", "recall", "f1", "accuracy",
                "precision_defined", "recall_defined", "f1_defined"]
        fh.write(",".join(cols) + "\n")
        for i, m in enumerate(result.per_task):
            fh.write(",".join([str(i)] + [
                f"{getattr(m, c):.12g}" if isinstance(getattr(m, c), float)
                else str(int(getattr(m, c))) for c in cols[1:]
            ]) + "\n")
        agg = result.aggregate
        lo, hi = agg.get("ci95", ("", ""))
        fh.write(f"aggregate,,,,{agg['mean']:.12g},,,\n")
        fh.write(f"aggregate_std,,,,{agg.get('std', ''):.12g},,,\n"
                 if "std" in agg else "")
        if "ci95" in agg:
            fh.write(f"aggregate_ci95,,,,{lo:.12g};{hi:.12g},,,\n")
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write("task," + ",".join(
            f"step{s}" for s in range(
                max((len(c) for c in result.curves), default=0))) + "\n")
        for i, curve in enumerate(result.curves):
            fh.write(",".join([str(i)] + [f"{v:.12g}" for v in curve]) + "\n")
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump({"wallclock_seconds": result.wallclock}, fh)


def load_run(out_dir: str) -> dict:
    """Reload exported artifacts for plotting without re-running."""
    if not os.path.exists(os.path.join(out_dir, "config.json")):
        raise T.DataError(f"no run artifacts in {out_dir}")
    with open(os.path.join(out_dir, "config.json")) as fh:
        config = json.load(fh)
    with open(os.path.join(out_dir, "metrics.csv")) as fh:
        metrics = fh.read()
    with open(os.path.join(out_dir, "curves.csv")) as fh:
        curves = fh.read()
    return {"config": config, "metrics": metrics, "curves": curves}
