"""MAML-style meta-training over an augmented task stream.

The outer loop minimizes the mean post-adaptation query loss across a
meta-batch of freshly augmented tasks. Inner adaptation is Z steps of SGD
on a class-balanced support set whose per-class size K~ varies uniformly
in [1, K] per episode. The meta-update is first-order by default (query
gradients at the adapted weights applied to theta); an exact second-order
mode is available for models whose ops all support symbolic VJPs
(dense-only networks).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .model import AdamState, Params, adam_step, sgd_step
from .tasks import (
    AugmentationConfig,
    Episode,
    TaskDataset,
    augment_task,
    sample_augmented_episode,
    sample_episode,
)

__all__ = [
    "MetaConfig",
    "MetaState",
    "TrainingError",
    "inner_adapt",
    "inner_adapt_second_order",
    "meta_step",
    "meta_train",
    "adapt_and_eval",
    "evaluate_accuracy",
    "baseline_vanilla",
    "baseline_transfer",
    "save_state",
    "load_state",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    meta_lr: float = 0.001
    inner_steps: int = 1
    meta_batch: int = 12
    iterations: int = 12000
    k_shot: int = 8                 # max per-class support budget K
    variable_k: bool = True
    query_size: int = 8
    meta_order: str = "first"       # or "second"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    dropout_in_meta: bool = False   # paper is silent; off by default
    eval_every: int = 200
    checkpoint_every: int = 200
    divergence_threshold: float = 1e3
    divergence_patience: int = 50

    def __post_init__(self):
        if self.inner_lr <= 0:
            raise T.ParameterError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.inner_steps < 1 or self.meta_batch < 1:
            raise T.ParameterError("inner_steps and meta_batch must be >= 1")
        if self.meta_order not in ("first", "second"):
            raise T.ParameterError(f"unknown meta_order {self.meta_order!r}")

    @staticmethod
    def desk_scale(**overrides) -> "MetaConfig":
        """CI-sized profile: fewer iterations and a smaller meta-batch."""
        base = dict(iterations=2000, meta_batch=2, k_shot=3, query_size=3)
        base.update(overrides)
        return MetaConfig(**base)


@dataclass
class MetaState:
    params: Params
    adam: AdamState
    iteration: int
    rngs: dict[str, np.random.Generator]

    @staticmethod
    def fresh(model, seed: int) -> "MetaState":
        streams = _make_rngs(seed)
        params = model.init_params(streams["init"])
        return MetaState(params=params, adam=AdamState(), iteration=0, rngs=streams)


def _make_rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "task", "augment", "episode", "dropout")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, seqs)}


# ---------------------------------------------------------------------------
# inner loop
# ---------------------------------------------------------------------------

def _grad_dict(gmap: T.GradientMap, leaves: dict[str, T.Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, leaf in leaves.items():
        if leaf in gmap:
            out[name] = gmap[leaf].data
        elif leaf.requires_grad:
            out[name] = np.zeros_like(leaf.data)
    return out


def inner_adapt(
    model,
    theta: Params,
    episode: Episode,
    alpha: float,
    steps: int = 1,
    rng: np.random.Generator | None = None,
    use_dropout: bool = False,
    stats_sink: dict | None = None,
    context: str = "",
) -> tuple[Params, list[float]]:
    """Z sequential SGD steps on the support loss, starting at theta.

    Returns the adapted parameters (theta itself is never touched) and the
    per-step support losses. BN uses batch statistics of the support set;
    if ``stats_sink`` is given the momentum-updated running stats from the
    first step are written into it.
    """
    if steps < 1:
        raise T.ParameterError(f"inner_adapt needs steps >= 1, got {steps}")
    current = theta
    losses: list[float] = []
    for s in range(steps):
        leaves = current.to_tensors()
        sink = stats_sink if (s == 0 and stats_sink is not None) else None
        logits = model.apply(
            leaves, episode.support_x, "train", rng=rng,
            stats_sink=sink, use_dropout=use_dropout,
        )
        loss = T.softmax_cross_entropy(logits, episode.support_y)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite support loss {context}")
        losses.append(float(loss.data))
        grads = _grad_dict(T.backward(loss), leaves)
        current = sgd_step(current, grads, alpha)
    return current, losses


def inner_adapt_second_order(
    model,
    leaves: dict[str, T.Tensor],
    episode: Episode,
    alpha: float,
    steps: int = 1,
) -> dict[str, T.Tensor]:
    """Symbolic inner adaptation: the adapted weights stay on the tape, so
    the query loss can be differentiated through the SGD steps."""
    current = dict(leaves)
    for _ in range(steps):
        logits = model.apply(current, episode.support_x, "train")
        loss = T.softmax_cross_entropy(logits, episode.support_y)
        gmap = T.backward(loss, create_graph=True)
        stepped = {}
        for name, leaf in current.items():
            if leaf.requires_grad and leaf in gmap:
                stepped[name] = T.add(leaf, T.mul(gmap[leaf], -alpha))
            else:
                stepped[name] = leaf
        current = stepped
    return current


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def meta_step(model, state: MetaState, tasks: list[TaskDataset],
              config: MetaConfig) -> tuple[MetaState, float]:
    """One meta-update over a batch of (augmented) tasks.

    Returns the new state and the mean query loss. The meta-gradient is an
    ordered mean over tasks; running BN stats on theta are refreshed from
    the support batches (mean over the per-task momentum updates).
    """
    episodes = []
    for task in tasks:
        try:
            episodes.append((task.task_id, sample_episode(
                task, config.k_shot, state.rngs["episode"],
                variable=config.variable_k, query_size=config.query_size,
            )))
        except (T.DataError, T.ShapeError) as exc:
            raise TrainingError(
                f"meta_step failed on task {task.task_id}: {exc}"
            ) from exc
    return _meta_step_episodes(model, state, episodes, config)


def _meta_step_episodes(model, state: MetaState,
                        episodes: list[tuple[str, Episode]],
                        config: MetaConfig) -> tuple[MetaState, float]:
    theta = state.params
    accum: dict[str, np.ndarray] = {}
    stat_accum: dict[str, list[np.ndarray]] = {}
    total_loss = 0.0
    dropout_rng = state.rngs["dropout"] if config.dropout_in_meta else None

    for task_id, episode in episodes:
        try:
            if config.meta_order == "second":
                if not getattr(model, "second_order_capable", False):
                    raise T.ParameterError(
                        "second-order meta-gradients need a model whose ops all "
                        "support symbolic VJPs (dense-only networks)"
                    )
                leaves = theta.to_tensors()
                phi = inner_adapt_second_order(
                    model, leaves, episode, config.inner_lr, config.inner_steps
                )
                q_logits = model.apply(phi, episode.query_x, "train")
                q_loss = T.softmax_cross_entropy(q_logits, episode.query_y)
                grads = _grad_dict(T.backward(q_loss), leaves)
            else:
                sink: dict = {}
                phi_params, _ = inner_adapt(
                    model, theta, episode, config.inner_lr, config.inner_steps,
                    rng=dropout_rng, use_dropout=config.dropout_in_meta,
                    stats_sink=sink, context=f"(task {task_id})",
                )
                for k, v in sink.items():
                    stat_accum.setdefault(k, []).append(v)
                phi = phi_params.to_tensors()
                q_logits = model.apply(
                    phi, episode.query_x, "train",
                    rng=dropout_rng, use_dropout=config.dropout_in_meta,
                )
                q_loss = T.softmax_cross_entropy(q_logits, episode.query_y)
                grads = _grad_dict(T.backward(q_loss), phi)
        except (T.DataError, T.ShapeError, TrainingError) as exc:
            raise TrainingError(
                f"meta_step failed on task {task_id}: {exc}"
            ) from exc
        if not np.isfinite(q_loss.data):
            raise TrainingError(f"non-finite query loss on task {task_id}")
        total_loss += float(q_loss.data)
        for name, g in grads.items():
            if name in accum:
                accum[name] += g
            else:
                accum[name] = g.copy()

    n = float(len(episodes))
    mean_grads = {k: v / n for k, v in accum.items()}
    new_adam, new_params = adam_step(state.adam, theta, mean_grads, config.meta_lr)
    if stat_accum:
        new_params = new_params.replace(
            {k: np.mean(v, axis=0) for k, v in stat_accum.items()}
        )
    return (
        MetaState(new_params, new_adam, state.iteration + 1, state.rngs),
        total_loss / n,
    )


def meta_train(
    model,
    registry: list[TaskDataset],
    config: MetaConfig,
    seed: int = 0,
    state: MetaState | None = None,
    log_path: str | None = None,
    checkpoint_dir: str | None = None,
    eval_fn=None,
) -> MetaState:
    """Run (or resume) meta-training over augmented draws from the registry.

    Each iteration draws ``meta_batch`` base tasks uniformly with
    replacement and pushes each through ``augment_task`` before the meta
    update. Divergence (query loss above the threshold for ``patience``
    consecutive iterations) aborts with diagnostics.
    """
    if not registry:
        raise T.ParameterError("meta_train needs at least one base task")
    if state is None:
        state = MetaState.fresh(model, seed)

    log_file = None
    writer = None
    if log_path:
        fresh = not os.path.exists(log_path) or state.iteration == 0
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["iteration", "meta_loss", "eval_accuracy"])

    diverged = 0
    try:
        while state.iteration < config.iterations:
            idx = state.rngs["task"].integers(0, len(registry), size=config.meta_batch)
            # fused augment+sample fast path: draws the transform plan with the
            # same rng stream order as augment_task, then transforms only the
            # episode's patches (tested equivalent to the composed path)
            episodes = []
            for i in idx:
                base = registry[i]
                episodes.append((base.task_id, sample_augmented_episode(
                    base, config.augmentation, state.rngs["augment"],
                    state.rngs["episode"], config.k_shot,
                    variable=config.variable_k, query_size=config.query_size,
                )))
            state, loss = _meta_step_episodes(model, state, episodes, config)
            diverged = diverged + 1 if loss > config.divergence_threshold else 0
            if diverged >= config.divergence_patience:
                raise TrainingError(
                    f"divergence: meta-loss > {config.divergence_threshold} for "
                    f"{diverged} consecutive iterations (at iteration {state.iteration})"
                )
            it = state.iteration
            if writer and (it % config.eval_every == 0 or it == config.iterations):
                acc = eval_fn(state) if eval_fn else ""
                writer.writerow([it, f"{loss:.6f}", acc])
                log_file.flush()
            if checkpoint_dir and (
                it % config.checkpoint_every == 0 or it == config.iterations
            ):
                save_state(os.path.join(checkpoint_dir, f"iter{it:06d}"), state)
    finally:
        if log_file:
            log_file.close()
    return state


# ---------------------------------------------------------------------------
# evaluation and baselines
# ---------------------------------------------------------------------------

def evaluate_accuracy(model, params: Params, x: np.ndarray, y: np.ndarray,
                      chunk: int = 256) -> float:
    preds = predict_labels(model, params, x, chunk)
    return float((preds == np.asarray(y)).mean())


def predict_labels(model, params: Params, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    tensors = params.to_tensors()
    out = []
    with T.no_grad():
        for i in range(0, len(x), chunk):
            logits = model.apply(tensors, x[i : i + chunk], "eval")
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def adapt_and_eval(
    model,
    theta: Params,
    task: TaskDataset,
    support_x: np.ndarray,
    support_y: np.ndarray,
    steps: int,
    alpha: float = 0.01,
    rng: np.random.Generator | None = None,
    use_dropout: bool = False,
) -> list[float]:
    """Adaptation curve: test-pool accuracy before adaptation and after each
    of ``steps`` SGD steps on the given support samples. Which samples make
    up the support set is the caller's policy (random or active)."""
    test_x, test_y = task.test_data()
    curve = [evaluate_accuracy(model, theta, test_x, test_y)]
    current = theta
    episode = Episode(support_x, support_y, support_x[:0], support_y[:0], 0,
                      np.array([]), np.array([]))
    for _ in range(steps):
        sink: dict = {}
        current, _ = inner_adapt(
            model, current, episode, alpha, 1,
            rng=rng, use_dropout=use_dropout, stats_sink=sink,
        )
        current = current.replace(sink)
        curve.append(evaluate_accuracy(model, current, test_x, test_y))
    return curve


def _train_on(model, params: Params, x, y, updates: int, lr: float,
              rng: np.random.Generator, batch_size: int = 32,
              adam: AdamState | None = None) -> tuple[Params, AdamState]:
    adam = adam or AdamState()
    n = len(x)
    for _ in range(updates):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        leaves = params.to_tensors()
        sink: dict = {}
        logits = model.apply(leaves, x[idx], "train", rng=rng,
                             stats_sink=sink, use_dropout=False)
        loss = T.softmax_cross_entropy(logits, y[idx])
        grads = _grad_dict(T.backward(loss), leaves)
        adam, params = adam_step(adam, params, grads, lr)
        params = params.replace(sink)
    return params, adam


def baseline_vanilla(
    model,
    task: TaskDataset,
    support_x: np.ndarray,
    support_y: np.ndarray,
    updates: int = 100,
    lr: float = 0.01,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Train from scratch on the given samples; returns test accuracy and
    test-pool predictions."""
    rng = np.random.default_rng(seed)
    params = model.init_params(rng)
    if len(support_x) and updates:
        params, _ = _train_on(model, params, support_x, support_y, updates, lr, rng)
    test_x, test_y = task.test_data()
    preds = predict_labels(model, params, test_x)
    return float((preds == test_y).mean()), preds


def baseline_transfer(
    model,
    meta_tasks: list[TaskDataset],
    task: TaskDataset,
    support_x: np.ndarray,
    support_y: np.ndarray,
    pretrain_updates: int = 100,
    finetune_updates: int = 100,
    lr: float = 0.01,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Sequential pre-training on the meta tasks, then full fine-tuning."""
    rng = np.random.default_rng(seed)
    params = model.init_params(rng)
    for mt in meta_tasks:
        tx, ty = mt.train_data()
        params, _ = _train_on(model, params, tx, ty, pretrain_updates, lr, rng)
    if len(support_x) and finetune_updates:
        params, _ = _train_on(model, params, support_x, support_y,
                              finetune_updates, lr, rng)
    test_x, test_y = task.test_data()
    preds = predict_labels(model, params, test_x)
    return float((preds == test_y).mean()), preds


# ---------------------------------------------------------------------------
# state persistence (bit-exact resume)
# ---------------------------------------------------------------------------

def save_state(directory: str, state: MetaState) -> None:
    os.makedirs(directory, exist_ok=True)
    blob = {f"theta.{k}": v for k, v in state.params.values.items()}
    blob.update({f"adam.m.{k}": v for k, v in state.adam.m.items()})
    blob.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    T.save_checkpoint(directory, blob)
    manifest = {
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "param_role": state.params.role,
        "rng_states": {k: _encode_rng(v) for k, v in state.rngs.items()},
    }
    with open(os.path.join(directory, "state.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_state(directory: str) -> MetaState:
    with open(os.path.join(directory, "state.json")) as f:
        manifest = json.load(f)
    blob = T.load_checkpoint(directory)
    params = {k[len("theta."):]: v for k, v in blob.items() if k.startswith("theta.")}
    m = {k[len("adam.m."):]: v for k, v in blob.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v_ for k, v_ in blob.items() if k.startswith("adam.v.")}
    rngs = {}
    for name, st in manifest["rng_states"].items():
        gen = np.random.Generator(np.random.PCG64())
        gen.bit_generator.state = _decode_rng(st)
        rngs[name] = gen
    return MetaState(
        params=Params(params, manifest.get("param_role", "meta")),
        adam=AdamState(t=manifest["adam_t"], m=m, v=v),
        iteration=manifest["iteration"],
        rngs=rngs,
    )


def _encode_rng(gen: np.random.Generator) -> dict:
    st = gen.bit_generator.state
    return {
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _decode_rng(enc: dict) -> dict:
    return {
        "bit_generator": "PCG64",
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }
