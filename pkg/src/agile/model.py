"""The patch classifier and its optimizers.

Architecture: four blocks of (conv 32@3x3, same padding -> batchnorm ->
relu -> [dropout] -> maxpool 2x2), then a dense projection of the
flattened feature map to 2 classes.

Parameter sets are immutable snapshots: every update op returns a new
``Params``; adaptation never touches the meta-parameters it started from.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "Params",
    "ConvClassifier",
    "DenseClassifier",
    "AdamState",
    "sgd_step",
    "adam_step",
]


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (32, 32, 7)  # (h, w, c)
    blocks: int = 4
    filters: int = 32
    kernel: int = 3
    classes: int = 2
    dropout_rate: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def spatial_out(self) -> tuple[int, int]:
        h, w, _ = self.input_shape
        for _ in range(self.blocks):
            h, w = h // 2, w // 2
        return h, w

    def dense_in(self) -> int:
        h, w = self.spatial_out()
        return h * w * self.filters


def _is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


class Params:
    """Ordered named parameter arrays with a role tag (meta vs adapted)."""

    def __init__(self, values: dict[str, np.ndarray], role: str = "meta"):
        self.values = dict(values)
        self.role = role

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def trainable_names(self) -> list[str]:
        return [n for n in self.values if _is_trainable(n)]

    def copy(self, role: str | None = None) -> "Params":
        return Params({k: v.copy() for k, v in self.values.items()}, role or self.role)

    def to_tensors(self) -> dict[str, Tensor]:
        """Fresh tape leaves; trainable params require grad."""
        return {
            n: Tensor(v, requires_grad=_is_trainable(n))
            for n, v in self.values.items()
        }

    def replace(self, updates: dict[str, np.ndarray], role: str | None = None) -> "Params":
        vals = dict(self.values)
        vals.update(updates)
        return Params(vals, role or self.role)

    def count(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def checksum(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.values.values()))


class ConvClassifier:
    """Builds and applies the 4-block conv net."""

    second_order_capable = False

    def __init__(self, config: ModelConfig):
        self.config = config
        h, w, _ = config.input_shape
        if h % (2 ** config.blocks) or w % (2 ** config.blocks):
            warnings.warn(
                f"input {h}x{w} not divisible by 2^{config.blocks}; "
                "pooling will floor odd dimensions"
            )

    def init_params(self, rng: np.random.Generator) -> Params:
        """He fan-in initialization; bn gamma=1, beta=0, zero running stats."""
        cfg = self.config
        values: dict[str, np.ndarray] = {}
        cin = cfg.input_shape[2]
        for b in range(cfg.blocks):
            fan_in = cfg.kernel * cfg.kernel * cin
            values[f"block{b}.kernel"] = rng.standard_normal(
                (cfg.kernel, cfg.kernel, cin, cfg.filters)
            ) * np.sqrt(2.0 / fan_in)
            values[f"block{b}.gamma"] = np.ones(cfg.filters)
            values[f"block{b}.beta"] = np.zeros(cfg.filters)
            values[f"block{b}.running_mean"] = np.zeros(cfg.filters)
            values[f"block{b}.running_var"] = np.ones(cfg.filters)
            cin = cfg.filters
        din = cfg.dense_in()
        values["head.weight"] = rng.standard_normal((din, cfg.classes)) * np.sqrt(2.0 / din)
        values["head.bias"] = np.zeros(cfg.classes)
        return Params(values, "meta")

    def apply(
        self,
        tensors: dict[str, Tensor],
        batch: np.ndarray,
        mode: str,
        rng: np.random.Generator | None = None,
        stats_sink: dict[str, np.ndarray] | None = None,
        use_dropout: bool | None = None,
    ) -> Tensor:
        """Forward pass to logits.

        mode: train -> batch stats, dropout on; eval -> running stats, no
        dropout; mc -> running stats, dropout on (fresh masks from rng).
        ``use_dropout`` overrides the mode default (meta-training runs with
        dropout off by default, see meta.MetaConfig).
        """
        cfg = self.config
        if mode not in ("train", "eval", "mc"):
            raise T.ParameterError(f"unknown forward mode {mode!r}")
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != cfg.input_shape:
            raise T.ShapeError(
                f"batch shape {x.shape[1:]} does not match config {cfg.input_shape}"
            )
        bn_mode = "train" if mode == "train" else "eval"
        drop = (mode in ("train", "mc")) if use_dropout is None else use_dropout
        if drop and cfg.dropout_rate > 0 and rng is None:
            raise T.ParameterError("dropout-active forward needs an rng")

        h = Tensor(x)
        for b in range(cfg.blocks):
            sink: dict | None = {} if (stats_sink is not None and bn_mode == "train") else None
            h = T.conv2d(h, tensors[f"block{b}.kernel"], "same")
            h = T.batchnorm(
                h,
                tensors[f"block{b}.gamma"],
                tensors[f"block{b}.beta"],
                bn_mode,
                tensors[f"block{b}.running_mean"].data,
                tensors[f"block{b}.running_var"].data,
                eps=cfg.bn_eps,
                momentum=cfg.bn_momentum,
                stats_sink=sink,
            )
            if sink is not None:
                stats_sink[f"block{b}.running_mean"] = sink["mean"]
                stats_sink[f"block{b}.running_var"] = sink["var"]
            h = T.relu(h)
            if drop and cfg.dropout_rate > 0:
                h = T.dropout(h, cfg.dropout_rate, "train", rng)
            h = T.maxpool2d(h)
        h = T.reshape(h, (x.shape[0], -1))
        return T.dense(h, tensors["head.weight"], tensors["head.bias"])


class DenseClassifier:
    """Small MLP over flat features; every op supports symbolic VJPs, so
    second-order meta-gradients work through it."""

    second_order_capable = True

    def __init__(self, layer_sizes: tuple[int, ...], classes: int = 2):
        self.layer_sizes = tuple(layer_sizes)
        self.classes = classes

    def init_params(self, rng: np.random.Generator) -> Params:
        values: dict[str, np.ndarray] = {}
        sizes = list(self.layer_sizes) + [self.classes]
        for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            values[f"fc{i}.weight"] = rng.standard_normal((fin, fout)) * np.sqrt(2.0 / fin)
            values[f"fc{i}.bias"] = np.zeros(fout)
        return Params(values, "meta")

    def apply(self, tensors, batch, mode="train", rng=None, stats_sink=None,
              use_dropout=None) -> Tensor:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        h: Tensor = Tensor(x)
        n_layers = len(self.layer_sizes)
        for i in range(n_layers):
            h = T.dense(h, tensors[f"fc{i}.weight"], tensors[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = T.relu(h)
        return h


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(params: Params, grads: dict[str, np.ndarray], lr: float) -> Params:
    """Out-of-place SGD update over the trainable parameters."""
    missing = [n for n in params.trainable_names() if n not in grads]
    if missing:
        raise T.ParameterError(f"sgd_step missing gradients for: {missing}")
    new = {}
    for n, v in params.values.items():
        if _is_trainable(n):
            new[n] = v - lr * grads[n]
        else:
            new[n] = v.copy()
    return Params(new, "adapted")


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    state: AdamState, params: Params, grads: dict[str, np.ndarray], lr: float
) -> tuple[AdamState, Params]:
    """Standard bias-corrected Adam; returns new state and new params."""
    missing = [n for n in params.trainable_names() if n not in grads]
    if missing:
        raise T.ParameterError(f"adam_step missing gradients for: {missing}")
    t = state.t + 1
    m, v = {}, {}
    new_vals = {}
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for n, p in params.values.items():
        if not _is_trainable(n):
            new_vals[n] = p.copy()
            continue
        g = grads[n]
        m[n] = b1 * state.m.get(n, 0.0) + (1 - b1) * g
        v[n] = b2 * state.v.get(n, 0.0) + (1 - b2) * g * g
        mhat = m[n] / (1 - b1 ** t)
        vhat = v[n] / (1 - b2 ** t)
        new_vals[n] = p - lr * mhat / (np.sqrt(vhat) + eps)
    new_state = AdamState(t=t, m=m, v=v, beta1=b1, beta2=b2, eps=eps)
    return new_state, Params(new_vals, params.role)
