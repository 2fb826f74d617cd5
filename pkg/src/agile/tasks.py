"""Task definitions, task-level augmentation and synthetic patch tasks.

A task is a binary patch-classification dataset with a fixed train/test
split (60/40 by default). New tasks are created from existing ones by
transforms that change P(Y|X): flipping every label, permuting the
biomarker channels, or rotating all patches by a multiple of 90 degrees.
Each transform fires as a whole-task Bernoulli draw and is recorded in the
task's provenance log, so augmentation is auditable and replayable.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import DataError, ParameterError, ShapeError

__all__ = [
    "TaskDataset",
    "AugmentationConfig",
    "Episode",
    "flip_labels",
    "shuffle_channels",
    "rotate_patches",
    "augment_task",
    "permutation_kernels",
    "generate_synthetic_task",
    "sample_episode",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class AugmentationConfig:
    p_flip: float = 0.5
    p_shuffle: float = 0.5
    p_rotate: float = 0.5

    def __post_init__(self):
        for name, p in (("p_flip", self.p_flip), ("p_shuffle", self.p_shuffle),
                        ("p_rotate", self.p_rotate)):
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must be in [0,1], got {p}")

    @staticmethod
    def equal(p: float) -> "AugmentationConfig":
        return AugmentationConfig(p, p, p)

    @staticmethod
    def off() -> "AugmentationConfig":
        return AugmentationConfig(0.0, 0.0, 0.0)


class TaskDataset:
    """Binary classification task: patches, labels, train/test split."""

    def __init__(
        self,
        task_id: str,
        patches: np.ndarray,       # [Q, h, w, c] float64 in [0,1]
        labels: np.ndarray,        # [Q] ints in {0,1}
        train_idx: np.ndarray,
        test_idx: np.ndarray,
        channel_names: list[str] | None = None,
        provenance: list[dict] | None = None,
    ):
        patches = np.asarray(patches, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if patches.ndim != 4:
            raise ShapeError(f"patches must be [Q,h,w,c], got {patches.shape}")
        if patches.shape[1] != patches.shape[2]:
            raise ShapeError(f"patches must be square, got {patches.shape}")
        if labels.shape != (patches.shape[0],):
            raise ShapeError("labels length must match patch count")
        if not set(np.unique(labels)) <= {0, 1}:
            raise DataError(f"labels must be binary, got {np.unique(labels)}")
        train_idx = np.asarray(train_idx, dtype=np.int64)
        test_idx = np.asarray(test_idx, dtype=np.int64)
        if np.intersect1d(train_idx, test_idx).size:
            raise DataError("train and test pools overlap")
        if len(train_idx) + len(test_idx) != patches.shape[0]:
            raise DataError("train+test pools must cover all samples")
        self.task_id = task_id
        self.patches = patches
        self.labels = labels
        self.train_idx = train_idx
        self.test_idx = test_idx
        self.channel_names = channel_names or [
            f"marker{i}" for i in range(patches.shape[3])
        ]
        self.provenance = list(provenance or [])

    # -- convenience ------------------------------------------------------
    @property
    def num_channels(self) -> int:
        return self.patches.shape[3]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    def train_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self.patches[self.train_idx], self.labels[self.train_idx]

    def test_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self.patches[self.test_idx], self.labels[self.test_idx]

    def _derive(self, patches, labels, event: dict, suffix: str) -> "TaskDataset":
        return TaskDataset(
            f"{self.task_id}{suffix}",
            patches,
            labels,
            self.train_idx.copy(),
            self.test_idx.copy(),
            list(self.channel_names),
            self.provenance + [event],
        )

    def equals(self, other: "TaskDataset") -> bool:
        return (
            np.array_equal(self.patches, other.patches)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.test_idx, other.test_idx)
        )


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    k_used: int
    support_idx: np.ndarray
    query_idx: np.ndarray


# ---------------------------------------------------------------------------
# task transforms
# ---------------------------------------------------------------------------

def flip_labels(task: TaskDataset, rng: np.random.Generator, p_flip: float) -> TaskDataset:
    """With one task-level Bernoulli(p_flip) draw, complement every label."""
    z = int(rng.random() < p_flip)
    if not z:
        return task._derive(task.patches, task.labels,
                            {"transform": "flip", "z": 0}, "")
    return task._derive(task.patches, 1 - task.labels,
                        {"transform": "flip", "z": 1}, "|flip")


def shuffle_channels(task: TaskDataset, rng: np.random.Generator, p_shuffle: float) -> TaskDataset:
    """With probability p_shuffle, apply a uniform random channel permutation
    to every patch. Position i of the new patch holds old channel perm[i]."""
    c = task.num_channels
    if c < 2:
        raise ShapeError("channel shuffle needs at least 2 channels")
    if rng.random() >= p_shuffle:
        return task._derive(task.patches, task.labels,
                            {"transform": "shuffle", "applied": False}, "")
    perm = rng.permutation(c)
    patches = task.patches[..., perm]
    names = [task.channel_names[j] for j in perm]
    out = task._derive(patches, task.labels,
                       {"transform": "shuffle", "applied": True,
                        "perm": perm.tolist()}, "|shuf")
    out.channel_names = names
    return out


def apply_permutation(patches: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Index-remap channel permutation (the oracle for the 1x1-conv form)."""
    return patches[..., np.asarray(perm)]


def permutation_kernels(perm: np.ndarray) -> np.ndarray:
    """The permutation as a stack of one-hot 1x1 conv kernels [1,1,c,c]:
    output channel i reads input channel perm[i]."""
    perm = np.asarray(perm)
    c = perm.size
    k = np.zeros((1, 1, c, c))
    for i, j in enumerate(perm):
        k[0, 0, j, i] = 1.0
    return k


def rotate_patches(task: TaskDataset, rng: np.random.Generator, p_rotate: float) -> TaskDataset:
    """With probability p_rotate, rotate every patch CCW by 90, 180 or 270
    degrees (chosen uniformly)."""
    if task.patches.shape[1] != task.patches.shape[2]:
        raise ShapeError("rotation needs square patches")
    if rng.random() >= p_rotate:
        return task._derive(task.patches, task.labels,
                            {"transform": "rotate", "applied": False}, "")
    quarter_turns = int(rng.integers(1, 4))  # 1..3 -> 90/180/270 CCW
    patches = np.ascontiguousarray(np.rot90(task.patches, k=quarter_turns, axes=(1, 2)))
    return task._derive(patches, task.labels,
                        {"transform": "rotate", "applied": True,
                         "degrees": 90 * quarter_turns}, f"|rot{90*quarter_turns}")


def augment_task(task: TaskDataset, config: AugmentationConfig,
                 rng: np.random.Generator) -> TaskDataset:
    """flip -> shuffle -> rotate with independent draws; identity transforms
    leave no provenance entry."""
    out = flip_labels(task, rng, config.p_flip)
    out = shuffle_channels(out, rng, config.p_shuffle)
    out = rotate_patches(out, rng, config.p_rotate)
    # drop the no-op records so zero-probability augmentation is an exact identity
    out.provenance = [
        e for e in out.provenance
        if e.get("z", 1) == 1 and e.get("applied", True)
    ]
    return out


def draw_transform_plan(num_channels: int, config: AugmentationConfig,
                        rng: np.random.Generator) -> dict:
    """Draw one task's transform plan using exactly the rng stream order of
    augment_task (flip z; shuffle gate then permutation; rotate gate then
    angle), so fused paths reproduce the composed path bit-for-bit."""
    plan: dict = {"flip": int(rng.random() < config.p_flip), "perm": None,
                  "quarter_turns": 0}
    if rng.random() < config.p_shuffle:
        plan["perm"] = rng.permutation(num_channels)
    if rng.random() < config.p_rotate:
        plan["quarter_turns"] = int(rng.integers(1, 4))
    return plan


def apply_plan_to_batch(patches: np.ndarray, labels: np.ndarray,
                        plan: dict) -> tuple[np.ndarray, np.ndarray]:
    """Apply a transform plan to a small batch (the episode fast path)."""
    if plan["flip"]:
        labels = 1 - labels
    if plan["perm"] is not None:
        patches = patches[..., plan["perm"]]
    if plan["quarter_turns"]:
        patches = np.ascontiguousarray(
            np.rot90(patches, k=plan["quarter_turns"], axes=(1, 2))
        )
    return patches, labels


# ---------------------------------------------------------------------------
# synthetic biomarker-patch tasks
# ---------------------------------------------------------------------------

def _gaussian_blob(size: int, center: tuple[float, float], sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-(((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2.0 * sigma ** 2)))


def generate_synthetic_task(
    rng: np.random.Generator,
    h: int = 32,
    w: int = 32,
    c: int = 7,
    signal_channel: int = 0,
    q: int = 400,
    blob_sigma: float | None = None,
    blob_amp: float = 0.8,
    noise_sigma: float = 0.15,
    train_fraction: float = 0.6,
    task_id: str | None = None,
) -> TaskDataset:
    """Synthetic stand-in for the cell-patch data.

    Positives carry a centered Gaussian blob in ``signal_channel`` on top of
    channel noise; negatives carry noise plus a distractor blob in one
    random non-signal channel. 50/50 class balance, 60/40 train/test split.
    """
    if h != w:
        raise ShapeError(f"patches must be square, got {h}x{w}")
    if c < 2:
        raise ParameterError(
            f"need at least 2 channels (signal + distractor), got c={c}"
        )
    if not 0 <= signal_channel < c:
        raise ParameterError(f"signal_channel {signal_channel} out of range for c={c}")
    if q % 2:
        raise ParameterError(f"Q must be even for a 50/50 class balance, got {q}")
    if noise_sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {noise_sigma}")
    if blob_sigma is None:
        blob_sigma = h / 6.0
    if blob_sigma <= 0 or blob_sigma > h:
        raise ParameterError(f"blob sigma {blob_sigma} degenerate for patch size {h}")

    center = ((h - 1) / 2.0, (w - 1) / 2.0)
    blob = _gaussian_blob(h, center, blob_sigma)

    patches = np.empty((q, h, w, c))
    labels = np.empty(q, dtype=np.int64)
    half = q // 2
    other = [ch for ch in range(c) if ch != signal_channel]
    for i in range(q):
        pos = i < half
        x = rng.normal(0.25, noise_sigma, size=(h, w, c))
        amp = blob_amp * (0.75 + 0.5 * rng.random())
        if pos:
            x[:, :, signal_channel] += amp * blob
        else:
            x[:, :, int(rng.choice(other))] += amp * blob
        patches[i] = np.clip(x, 0.0, 1.0)
        labels[i] = 1 if pos else 0

    order = rng.permutation(q)
    patches, labels = patches[order], labels[order]
    n_train = int(round(train_fraction * q))
    split = rng.permutation(q)
    train_idx, test_idx = np.sort(split[:n_train]), np.sort(split[n_train:])
    return TaskDataset(
        task_id or f"synthetic-s{signal_channel}",
        patches,
        labels,
        train_idx,
        test_idx,
        [f"marker{i}" for i in range(c)],
        [{"generator": "synthetic", "signal_channel": signal_channel}],
    )


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

def _draw_support_query(
    train: np.ndarray,
    labels: np.ndarray,
    k: int,
    rng: np.random.Generator,
    variable: bool,
    query_size: int,
    task_id: str,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Class-balanced support + disjoint query indices from a train pool."""
    lab = labels[train]
    per_class = {cls: train[lab == cls] for cls in (0, 1)}
    for cls, pool in per_class.items():
        if len(pool) < k + 1:
            raise DataError(
                f"train pool of task {task_id} has only {len(pool)} samples "
                f"of class {cls}; need at least {k + 1}"
            )
    k_used = int(rng.integers(1, k + 1)) if variable else k
    support = np.concatenate([
        rng.choice(per_class[cls], size=k_used, replace=False) for cls in (0, 1)
    ])
    remaining = np.setdiff1d(train, support)
    qs = min(query_size, len(remaining))
    query = rng.choice(remaining, size=qs, replace=False)
    return support, query, k_used


def sample_episode(
    task: TaskDataset,
    k: int,
    rng: np.random.Generator,
    variable: bool = True,
    balanced: bool = True,
    query_size: int = 8,
) -> Episode:
    """Draw a support/query episode from the task's train pool.

    With ``variable``, the per-class shot count K~ is uniform in [1, k]
    (one draw shared by both classes in balanced mode). Support and query
    never overlap and never touch the test pool.
    """
    if not balanced:
        raise ParameterError("only class-balanced episode sampling is implemented")
    support, query, k_used = _draw_support_query(
        task.train_idx, task.labels, k, rng, variable, query_size, task.task_id
    )
    return Episode(
        support_x=task.patches[support],
        support_y=task.labels[support],
        query_x=task.patches[query],
        query_y=task.labels[query],
        k_used=k_used,
        support_idx=support,
        query_idx=query,
    )


def sample_augmented_episode(
    task: TaskDataset,
    config: AugmentationConfig,
    rng_augment: np.random.Generator,
    rng_episode: np.random.Generator,
    k: int,
    variable: bool = True,
    query_size: int = 8,
) -> Episode:
    """Episode from a freshly augmented view of ``task``, without
    materializing the transformed dataset. Bit-identical to
    ``sample_episode(augment_task(task, ...), ...)`` with the same rngs."""
    plan = draw_transform_plan(task.num_channels, config, rng_augment)
    labels = (1 - task.labels) if plan["flip"] else task.labels
    support, query, k_used = _draw_support_query(
        task.train_idx, labels, k, rng_episode, variable, query_size, task.task_id
    )
    sx, sy = apply_plan_to_batch(task.patches[support], labels[support],
                                 {**plan, "flip": 0})
    qx, qy = apply_plan_to_batch(task.patches[query], labels[query],
                                 {**plan, "flip": 0})
    return Episode(sx, sy, qx, qy, k_used, support, query)


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<task_id>/manifest.json + patches.bin
# ---------------------------------------------------------------------------

def save_dataset(root: str, tasks: list[TaskDataset]) -> None:
    for task in tasks:
        d = os.path.join(root, task.task_id.replace("|", "_").replace("/", "_"))
        os.makedirs(d, exist_ok=True)
        q, h, w, c = task.patches.shape
        manifest = {
            "task_id": task.task_id,
            "h": h, "w": w, "c": c, "q": q,
            "channel_names": task.channel_names,
            "labels": task.labels.tolist(),
            "train_idx": task.train_idx.tolist(),
            "test_idx": task.test_idx.tolist(),
            "provenance": task.provenance,
        }
        with open(os.path.join(d, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
        np.ascontiguousarray(task.patches, dtype="<f8").tofile(
            os.path.join(d, "patches.bin")
        )


def load_dataset(root: str) -> list[TaskDataset]:
    """Load every task directory under root; bit-exact with save_dataset."""
    if not os.path.isdir(root):
        raise DataError(f"dataset root does not exist: {root}")
    tasks = []
    entries = sorted(
        e for e in os.listdir(root) if os.path.isdir(os.path.join(root, e))
    )
    for entry in entries:
        d = os.path.join(root, entry)
        mpath = os.path.join(d, "manifest.json")
        if not os.path.exists(mpath):
            raise DataError(f"missing manifest: {mpath}")
        with open(mpath) as f:
            m = json.load(f)
        blob_path = os.path.join(d, "patches.bin")
        expected = m["q"] * m["h"] * m["w"] * m["c"]
        try:
            blob = np.fromfile(blob_path, dtype="<f8")
        except OSError as exc:
            raise DataError(f"unreadable patch blob: {blob_path}: {exc}") from exc
        if blob.size != expected:
            raise DataError(
                f"corrupted patch blob {blob_path}: expected {expected} floats, "
                f"found {blob.size}"
            )
        patches = blob.reshape(m["q"], m["h"], m["w"], m["c"]).astype(np.float64)
        tasks.append(TaskDataset(
            m["task_id"], patches, np.asarray(m["labels"]),
            np.asarray(m["train_idx"]), np.asarray(m["test_idx"]),
            m["channel_names"], m.get("provenance"),
        ))
    if not tasks:
        warnings.warn(f"no task directories found under {root}")
    return tasks
