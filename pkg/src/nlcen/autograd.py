"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op takes :class:`Tensor` inputs, computes its result eagerly in
float64, and (when any input requires a gradient) records a closure that
maps the output gradient to input gradients.  :func:`backward` walks the
recorded graph in reverse topological order.

Layout convention for images and feature maps is ``(batch, channels,
height, width)``.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "forward_op",
    "OP_KINDS",
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "exp",
    "neg_sq_dist",
    "reduce_sum",
    "mean",
    "batchnorm2d",
    "resize_bilinear",
    "concat",
    "reshape",
    "transpose",
]

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Input shapes do not conform to what an op requires."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An array that can take part in a differentiable computation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered record of the ops that produced ``output``.

    ``nodes`` lists every tensor reachable from ``output`` through recorded
    ops, inputs before the ops that consume them.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def edges(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(n.node_id, tuple(p.node_id for p in n._parents)) for n in self.nodes]


def backward(loss: Tensor, graph: Graph | None = None, populate: bool = True) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from node id to gradient for every node that requires a
    gradient.  With ``populate`` leaf tensors additionally get their
    ``.grad`` overwritten.  Gradients from multiple consumers of one tensor
    are summed.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    graph = graph or Graph(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for node in graph.nodes if populate else ():
        if node.is_leaf and node.requires_grad:
            node.grad = grads.get(node.node_id, np.zeros_like(node.data))
    return grads


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to each tensor in ``inputs``.

    Unlike :func:`backward` this leaves every tensor's ``.grad`` untouched.
    """
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError(f"grad: tensor {t.name or t.node_id} is detached (requires_grad=False)")
    graph = Graph(loss)
    ids = {n.node_id for n in graph.nodes}
    grads = backward(loss, graph, populate=False)
    out = []
    for t in inputs:
        if t.node_id not in ids:
            out.append(np.zeros_like(t.data))
        else:
            out.append(grads.get(t.node_id, np.zeros_like(t.data)))
    return out


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), "sub", lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), "mul", bw)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), "scalar-mul", lambda g: (g * c,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), "exp", lambda g: (g * e,))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax: non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), "softmax", bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("log_softmax: non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), "log-softmax", bw)


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) for {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), "matmul", bw)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), "reduce-sum", bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / n)


def neg_sq_dist(z, d) -> Tensor:
    """``-||z_n - d_k||^2`` for ``z`` of shape (..., N, D) and ``d`` of shape (K, D).

    Output shape is (..., N, K).
    """
    z, d = _as_tensor(z), _as_tensor(d)
    if d.ndim != 2 or z.shape[-1] != d.shape[-1]:
        raise ShapeError(f"neg-squared-distance: feature widths differ, {z.shape} vs codebook {d.shape}")
    r = z.data[..., :, None, :] - d.data  # (..., N, K, D)
    out = -np.einsum("...nkd,...nkd->...nk", r, r)
    zshape = z.shape

    def bw(g):
        gr = g[..., None] * r
        gz = -2.0 * gr.sum(axis=-2)
        gd = 2.0 * gr.reshape(-1, *gr.shape[-2:]).sum(axis=0)
        return _unbroadcast(gz, zshape), gd

    return _make(out, (z, d), "neg-squared-distance", bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=ax)))


# ---------------------------------------------------------------------------
# Image ops
# ---------------------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via an explicit window gather.

    ``x``: (B, C, H, W); ``w``: (O, C, kh, kw); ``b``: (O,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Cw}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ShapeError(f"conv2d: invalid stride={s} padding={p}")
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(O, C, kh, kw)
        gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, Hp, Wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return _make(out, parents, "conv2d", bw)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a (B, C, H, W) tensor.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running
    statistics are used.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-D input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} do not match {C} channels")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            gx = (inv[None, :, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), "batchnorm2d", bw)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights with half-pixel centres (edge clamped)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` (half-pixel centres)."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"bilinear-resize: expected at least 2-D input, got {x.shape}")
    Ho, Wo = int(size[0]), int(size[1])
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"bilinear-resize: invalid target size {size}")
    H, W = x.shape[-2:]
    if (H, W) == (Ho, Wo):
        return _make(x.data.copy(), (x,), "bilinear-resize", lambda g: (g,))
    mh = _interp_matrix(Ho, H)
    mw = _interp_matrix(Wo, W)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), "bilinear-resize", lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------------------
# Dispatch by kind
# ---------------------------------------------------------------------------

OP_KINDS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scale,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "exp": exp,
    "neg-squared-distance": neg_sq_dist,
    "reduce-sum": reduce_sum,
    "batchnorm2d": batchnorm2d,
    "bilinear-resize": resize_bilinear,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OP_KINDS)}") from None
    return fn(*inputs, **attrs)
