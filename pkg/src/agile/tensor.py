"""Minimal dense-tensor library with reverse-mode autodiff.

Everything is float64, row-major, NHWC. The op set is exactly what the
patch classifier needs: conv2d, maxpool2d, batchnorm, relu, dense
(matmul + bias), dropout and softmax cross-entropy, plus the elementwise
glue (add/mul/sum/...) required to express SGD inner steps symbolically
for second-order meta-gradients.

Backward has two paths:
  * the fast path works on raw ndarrays,
  * the symbolic path (``create_graph=True``) re-expresses each op's VJP
    with tape ops so the resulting gradients are differentiable again.
    Only the ops a dense-layer network needs implement it; structural
    ops (conv, pool, batchnorm) raise if asked.
"""

from __future__ import annotations

import os
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradientMap",
    "ShapeError",
    "ParameterError",
    "DataError",
    "no_grad",
    "backward",
    "conv2d",
    "maxpool2d",
    "batchnorm",
    "relu",
    "dense",
    "dropout",
    "softmax_cross_entropy",
    "finite_diff_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """An op parameter is outside its valid range."""


class DataError(ValueError):
    """Input data violates an op precondition (labels, probabilities...)."""


# When enabled every op output is scanned for non-finite values.  On by
# default in tests (cheap at desk scale), can be disabled for long runs.
STRICT_FINITE = os.environ.get("AGILE_STRICT_FINITE", "0") == "1"

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


class _Node:
    """One tape record: parents plus the VJP closures."""

    __slots__ = ("parents", "vjp", "vjp_sym")

    def __init__(self, parents, vjp, vjp_sym=None):
        self.parents = parents
        self.vjp = vjp
        self.vjp_sym = vjp_sym


class Tensor:
    """Immutable-by-convention dense float64 array, optionally on tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None

    # -- construction helpers -------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents, vjp, vjp_sym=None) -> "Tensor":
        if STRICT_FINITE and not np.all(np.isfinite(data)):
            raise DataError("non-finite values produced by a forward op")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.node = _Node(parents, vjp, vjp_sym) if out.requires_grad else None
        return out

    # -- basic introspection --------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, k):
        return pow_(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return mul(sum_(self, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _unbroadcast_sym(grad: Tensor, shape: tuple) -> Tensor:
    if grad.shape == shape:
        return grad
    extra = len(grad.shape) - len(shape)
    if extra:
        grad = sum_(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = sum_(grad, axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    def vjp_sym(g):
        return _unbroadcast_sym(g, a.data.shape), _unbroadcast_sym(g, b.data.shape)

    return Tensor._make(out, (a, b), vjp, vjp_sym)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    def vjp_sym(g):
        ga = _unbroadcast_sym(mul(g, b), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast_sym(mul(g, a), b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), vjp, vjp_sym)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    if STRICT_FINITE and not np.all(np.isfinite(out)):
        raise DataError("division produced non-finite values")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data ** 2), b.data.shape) if b.requires_grad else None
        return ga, gb

    def vjp_sym(g):
        ga = _unbroadcast_sym(div(g, b), a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast_sym(mul(mul(g, -1.0), div(a, mul(b, b))), b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return Tensor._make(out, (a, b), vjp, vjp_sym)


def pow_(a, k: float) -> Tensor:
    a = _wrap(a)
    k = float(k)
    out = a.data ** k

    def vjp(g):
        return (g * k * a.data ** (k - 1.0),)

    def vjp_sym(g):
        return (mul(g, mul(pow_(a, k - 1.0), k)),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    if STRICT_FINITE and not np.all(np.isfinite(out_data)):
        raise DataError("exp overflow")

    def vjp(g):
        return (g * out_data,)

    def vjp_sym(g):
        return (mul(g, out),)

    out = Tensor._make(out_data, (a,), vjp, vjp_sym)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)
    if STRICT_FINITE and not np.all(np.isfinite(out)):
        raise DataError("log of non-positive value")

    def vjp(g):
        return (g / a.data,)

    def vjp_sym(g):
        return (div(g, a),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0),)

    def vjp_sym(g):
        return (mul(g, Tensor((a.data > 0).astype(np.float64))),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    def vjp_sym(g):
        return (reshape(g, a.data.shape),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    def vjp_sym(g):
        return (_unbroadcast_sym(g, a.data.shape),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ax = None if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    # shape the reduced gradient back to, before broadcasting
    if ax is None:
        mid_shape = (1,) * a.data.ndim
    else:
        mid_shape = tuple(
            1 if i in tuple(j % a.data.ndim for j in ax) else s
            for i, s in enumerate(a.data.shape)
        )

    def vjp(g):
        g = np.asarray(g)
        return (np.ascontiguousarray(np.broadcast_to(g.reshape(mid_shape), a.data.shape)),)

    def vjp_sym(g):
        return (broadcast_to(reshape(g, mid_shape), a.data.shape),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul expects [N,K] @ [K,M], got {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    def vjp_sym(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), vjp, vjp_sym)


def transpose(a) -> Tensor:
    a = _wrap(a)
    out = a.data.T

    def vjp(g):
        return (g.T,)

    def vjp_sym(g):
        return (transpose(g),)

    return Tensor._make(out, (a,), vjp, vjp_sym)


def dense(x, weight, bias) -> Tensor:
    """Affine map: x [N,Fin] @ weight [Fin,Fout] + bias [Fout]."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"dense expects [N,Fin] x [Fin,Fout], got {x.data.shape} x {weight.data.shape}"
        )
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# structural ops (raw backward only)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int):
    """Extract kh x kw windows; returns [N*Ho*Wo, kh*kw*C] columns."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N,Ho,Wo,C,kh,kw
    n, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * xp.shape[3]), ho, wo


def conv2d(x, kernel, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1, NHWC; kernel [kh,kw,Cin,Cout]."""
    x, kernel = _wrap(x), _wrap(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects input [N,H,W,Cin] and kernel [kh,kw,Cin,Cout], "
            f"got {x.data.shape} and {kernel.data.shape}"
        )
    n, h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}"
        )
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ParameterError(f"unknown padding {padding!r}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"kernel {kernel.data.shape} larger than padded input {x.data.shape}"
        )
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    cols, ho, wo = _im2col(xp, kh, kw)
    out = (cols @ kernel.data.reshape(kh * kw * cin, cout)).reshape(n, ho, wo, cout)

    def vjp(g):
        gf = g.reshape(-1, cout)
        gk = (cols.T @ gf).reshape(kh, kw, cin, cout) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # one GEMM back to column space, then scatter-add (col2im)
            gcols = (gf @ kernel.data.reshape(kh * kw * cin, cout).T)
            gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :] if ph or pw else gxp
        return gx, gk

    return Tensor._make(out, (x, kernel), vjp)


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; odd trailing rows/cols are dropped."""
    x = _wrap(x)
    if window != 2 or stride != 2:
        raise ParameterError("only window=2, stride=2 pooling is supported")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,H,W,C], got {x.data.shape}")
    n, h, w, c = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs H,W >= 2, got {x.data.shape}")
    h2, w2 = h // 2, w // 2
    # the four window corners as strided views, in row-major window order
    # so ties route to the first (row-major) maximal element
    corners = [
        x.data[:, i : h2 * 2 : 2, j : w2 * 2 : 2, :]
        for i in (0, 1)
        for j in (0, 1)
    ]
    out = np.maximum(np.maximum(corners[0], corners[1]),
                     np.maximum(corners[2], corners[3]))

    def vjp(g):
        gx = np.zeros_like(x.data)
        unclaimed = np.ones(out.shape, dtype=bool)
        for corner, (i, j) in zip(corners, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (corner == out) & unclaimed
            gx[:, i : h2 * 2 : 2, j : w2 * 2 : 2, :] = g * hit
            unclaimed &= ~hit
        return (gx,)

    return Tensor._make(np.ascontiguousarray(out), (x,), vjp)


def batchnorm(
    x,
    gamma,
    beta,
    mode: str,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.9,
    stats_sink: dict | None = None,
) -> Tensor:
    """Per-channel (last axis) batch normalization.

    ``train`` normalizes with batch statistics and, if ``stats_sink`` is
    given, writes the momentum-updated running stats into it (the running
    arrays themselves are never mutated; parameter sets stay immutable).
    ``eval`` normalizes with the provided running statistics.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if mode not in ("train", "eval"):
        raise ParameterError(f"unknown batchnorm mode {mode!r}")
    c = x.data.shape[-1]
    axes = tuple(range(x.data.ndim - 1))
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats_sink is not None:
            stats_sink["mean"] = momentum * running_mean + (1.0 - momentum) * mean
            stats_sink["var"] = momentum * running_var + (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    # fused scale/shift: out = x * s + t, with xhat cached for the backward
    xhat = x.data - mean
    xhat *= inv_std
    s = gamma.data * inv_std
    out = xhat * gamma.data
    out += beta.data

    def vjp(g):
        m = float(np.prod([x.data.shape[a] for a in axes]))
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        prodsum = (g * xhat).sum(axis=axes)
        ggamma = prodsum if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            if mode == "train":
                gx = xhat * (-s * (prodsum / m))
                gx += s * g
                gx -= s * (g.sum(axis=axes) / m)
            else:
                gx = g * s
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), vjp)


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    x = _wrap(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval", "mc"):
        raise ParameterError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return mul(x, 1.0)  # exact identity, still on tape
    if rng is None:
        raise ParameterError("dropout in train/mc mode needs an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean NLL of integer labels under softmax(logits); stable log-sum-exp."""
    logits = _wrap(logits)
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N,C], got {logits.data.shape}")
    n, c = logits.data.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels must be [N]={n}, got {lab.shape}")
    lab_i = lab.astype(np.int64)
    if not np.array_equal(lab_i, lab) or lab_i.min() < 0 or lab_i.max() >= c:
        raise DataError(f"labels must be integers in [0, {c}), got {np.unique(lab)}")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = np.asarray(-logp[np.arange(n), lab_i].mean())

    probs = np.exp(logp)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), lab_i] = 1.0

    def vjp(g):
        return ((probs - onehot) * (float(g) / n), None)

    def vjp_sym(g):
        # re-derive softmax symbolically so the VJP is differentiable
        zt = add(logits, Tensor(-zmax))
        e = exp(zt)
        p = div(e, sum_(e, axis=1, keepdims=True))
        return (mul(add(p, Tensor(-onehot)), mul(g, 1.0 / n)), None)

    return Tensor._make(out, (logits, Tensor(lab_i.astype(np.float64))), vjp, vjp_sym)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class GradientMap:
    """Maps requires-grad leaf tensors to their gradients."""

    def __init__(self):
        self._grads: dict[int, Tensor] = {}
        self._leaves: dict[int, Tensor] = {}

    def _put(self, leaf: Tensor, grad: Tensor):
        self._grads[id(leaf)] = grad
        self._leaves[id(leaf)] = leaf

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __getitem__(self, leaf: Tensor) -> Tensor:
        return self._grads[id(leaf)]

    def __len__(self):
        return len(self._grads)

    def leaves(self):
        return list(self._leaves.values())


def _toposort(root: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Topological order of tape nodes plus the requires-grad leaves."""
    order: list[Tensor] = []
    leaves: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                leaves.append(t)
            continue
        stack.append((t, True))
        for p in t.node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order, leaves


def backward(loss: Tensor, create_graph: bool = False) -> GradientMap:
    """Reverse-mode gradients of a scalar loss for every requires-grad leaf."""
    if loss.data.shape != ():
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ParameterError("loss does not require grad (no tape)")

    order, leaves = _toposort(loss)
    grads: dict[int, object] = {
        id(loss): Tensor(np.ones(())) if create_graph else np.ones(())
    }

    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if create_graph:
            if node.vjp_sym is None:
                raise ParameterError(
                    "create_graph=True requires symbolic VJPs on every op in the "
                    "graph; this graph contains a structural op (conv/pool/bn)"
                )
            parent_grads = node.vjp_sym(g)
        else:
            parent_grads = node.vjp(g.data if isinstance(g, Tensor) else g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = (
                    add(grads[key], pg)
                    if create_graph
                    else grads[key] + (pg.data if isinstance(pg, Tensor) else pg)
                )
            else:
                grads[key] = pg

    gmap = GradientMap()
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is not None:
            gmap._put(leaf, g if isinstance(g, Tensor) else Tensor(g))
    return gmap


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], float],
    point: dict[str, np.ndarray],
    eps: float = 1e-5,
    analytic: dict[str, np.ndarray] | None = None,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` maps a dict of raw parameter arrays to a scalar. If ``analytic``
    is not given, it is computed by running ``f`` once through the tape
    (``f`` must then accept Tensors and return a loss Tensor). Returns the
    max relative error over the checked coordinates.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if analytic is None:
        tensors = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
        loss = f(tensors)
        gmap = backward(loss)
        analytic = {
            k: (gmap[t].data if t in gmap else np.zeros_like(t.data))
            for k, t in tensors.items()
        }

        def f_raw(p):
            with no_grad():
                return float(f({k: Tensor(v) for k, v in p.items()}).data)
    else:
        f_raw = f

    max_err = 0.0
    for name, arr in point.items():
        flat = arr.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            idxs = (rng or np.random.default_rng(0)).choice(
                n, size=max_coords_per_param, replace=False
            )
        else:
            idxs = range(n)
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f_raw(point)
            flat[i] = orig - eps
            fm = f_raw(point)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            denom = max(abs(num), abs(ga[i]), 1.0)
            max_err = max(max_err, abs(ga[i] - num) / denom)
    return max_err


# ---------------------------------------------------------------------------
# checkpoint format: manifest.txt + params.bin (little-endian float64)
# ---------------------------------------------------------------------------

def save_checkpoint(directory: str, params: dict[str, np.ndarray]) -> None:
    """Write a bit-exact parameter checkpoint (text manifest + raw blob)."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    offset = 0
    with open(os.path.join(directory, "params.bin"), "wb") as blob:
        for name, arr in params.items():
            # np.array keeps 0-d scalars 0-d (ascontiguousarray would not)
            a = np.array(arr, dtype="<f8", copy=True, order="C")
            shape = ",".join(str(s) for s in a.shape) or "scalar"
            lines.append(f"{name} {shape} {offset}\n")
            blob.write(a.tobytes())
            offset += a.nbytes
    with open(os.path.join(directory, "manifest.txt"), "w") as mf:
        mf.writelines(lines)


def load_checkpoint(directory: str) -> dict[str, np.ndarray]:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise DataError(f"missing checkpoint manifest: {manifest}")
    blob = np.fromfile(os.path.join(directory, "params.bin"), dtype="<f8")
    params: dict[str, np.ndarray] = {}
    with open(manifest) as mf:
        for line in mf:
            name, shape_s, offset_s = line.split()
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            start = int(offset_s) // 8
            params[name] = blob[start : start + count].reshape(shape).astype(np.float64)
    return params
