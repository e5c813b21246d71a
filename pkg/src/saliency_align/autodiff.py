"""Reverse-mode differentiation over dense float64 arrays.

Every operation's vector-Jacobian product is itself written with operations
from this module, so a gradient computed with ``create_graph=True`` is an
ordinary differentiable expression. That is all double backpropagation needs:
build ``||d loss / d x||^2`` from first-order gradient nodes and differentiate
it again with respect to the parameters.

The op set is deliberately small: elementwise arithmetic on equal shapes,
scalar scaling, 2-D matmul, bias-add, explicit axis reductions/expansions,
3x3 same-padded convolution, 2x2 max pooling (as a gather), mask
multiplication (ReLU, leaky ReLU, dropout) and log-softmax.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "no_grad",
    "enable_grad",
    "gradients",
    "forward_eval",
    "grad",
    "grad_of_grad",
    "finite_diff_check",
    "relu",
    "leaky_relu",
    "mask_mul",
    "conv2d",
    "maxpool2d",
    "log_softmax",
    "exp",
    "matmul",
    "add_bias",
    "reshape",
    "transpose",
    "sum",
    "sum_axes",
    "expand",
    "dot_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def _set_recording(flag: bool):
    prev = _recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    """Context manager that disables graph construction in this thread."""
    return _set_recording(False)


def enable_grad():
    return _set_recording(True)


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "op", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.op: Op | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or (type(self.op).__name__ if self.op else "leaf")
        return f"Tensor<{label}>(shape={self.shape})"

    def __add__(self, other):
        return Add()(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub()(self, _as_tensor(other))

    def __rsub__(self, other):
        return Sub()(_as_tensor(other), self)

    def __neg__(self):
        return Scale(-1.0)(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return Scale(float(other))(self)
        return Mul()(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a Python scalar is supported")
        return Scale(1.0 / float(other))(self)

    def __matmul__(self, other):
        return MatMul()(self, _as_tensor(other))

    @property
    def T(self):
        return Transpose()(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape(shape)(self)

    def sum(self, axes=None):
        return sum_axes(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Op:
    """Base class: ``forward`` works on arrays, ``vjp`` on Tensors."""

    def __call__(self, *inputs: Tensor) -> Tensor:
        value = self.forward(*(t.value for t in inputs))
        out = Tensor(value)
        if _recording() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.parents = inputs
            out.op = self
        return out

    def forward(self, *values: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: Tensor, out: Tensor, *inputs: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError

    def _check_same(self, a: np.ndarray, b: np.ndarray) -> None:
        if a.shape != b.shape:
            raise ShapeError(f"{type(self).__name__}: shapes {a.shape} and {b.shape} differ")


class Add(Op):
    def forward(self, a, b):
        self._check_same(a, b)
        return a + b

    def vjp(self, g, out, a, b):
        return g, g


class Sub(Op):
    def forward(self, a, b):
        self._check_same(a, b)
        return a - b

    def vjp(self, g, out, a, b):
        return g, -g


class Mul(Op):
    def forward(self, a, b):
        self._check_same(a, b)
        return a * b

    def vjp(self, g, out, a, b):
        return g * b, g * a


class Scale(Op):
    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return self.c * a

    def vjp(self, g, out, a):
        return (Scale(self.c)(g),)


class Exp(Op):
    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, out, a):
        return (g * out,)


class MaskMul(Op):
    """Multiply by a constant array; the mask receives no gradient."""

    def __init__(self, mask: np.ndarray):
        self.mask = mask

    def forward(self, a):
        self._check_same(a, self.mask)
        return a * self.mask

    def vjp(self, g, out, a):
        return (MaskMul(self.mask)(g),)


class MatMul(Op):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"MatMul: cannot multiply {a.shape} by {b.shape}")
        return a @ b

    def vjp(self, g, out, a, b):
        return g @ b.T, a.T @ g


class Transpose(Op):
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"Transpose: expected a matrix, got shape {a.shape}")
        return a.T

    def vjp(self, g, out, a):
        return (Transpose()(g),)


class Reshape(Op):
    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def forward(self, a):
        self.in_shape = a.shape
        try:
            return a.reshape(self.shape)
        except ValueError as exc:
            raise ShapeError(f"Reshape: cannot reshape {a.shape} to {self.shape}") from exc

    def vjp(self, g, out, a):
        return (Reshape(self.in_shape)(g),)


class AddBias(Op):
    """``x[..., c] + b[c]``: the only implicit broadcast in the engine."""

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[-1:] != b.shape:
            raise ShapeError(f"AddBias: bias {b.shape} does not match last axis of {x.shape}")
        return x + b

    def vjp(self, g, out, x, b):
        return g, sum_axes(g, tuple(range(g.ndim - 1)))


class SumAxes(Op):
    def __init__(self, axes: tuple[int, ...]):
        self.axes = axes

    def forward(self, a):
        self.in_shape = a.shape
        return a.sum(axis=self.axes)

    def vjp(self, g, out, a):
        return (Expand(self.in_shape, self.axes)(g),)


class Expand(Op):
    """Inverse of ``SumAxes``: replicate along the reduced axes."""

    def __init__(self, shape: tuple[int, ...], axes: tuple[int, ...]):
        self.shape = shape
        self.axes = axes

    def forward(self, a):
        kept = tuple(1 if i in self.axes else s for i, s in enumerate(self.shape))
        if a.size != int(np.prod(kept)):
            raise ShapeError(f"Expand: {a.shape} cannot expand to {self.shape} over axes {self.axes}")
        return np.broadcast_to(a.reshape(kept), self.shape).copy()

    def vjp(self, g, out, a):
        return (SumAxes(self.axes)(g),)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N*H*W, 9*C) patches of a zero-padded 3x3 window."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 3, 3, c))
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Same-padded 3x3 convolution; also returns the patch matrix when built.

    With fewer output than input channels it is cheaper to multiply first
    and shift-add the nine partial maps than to materialise the patches.
    """
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    if cout >= cin:
        cols = _im2col(x)
        return (cols @ w.reshape(-1, cout)).reshape(n, h, wd, cout), cols
    y = (x.reshape(-1, cin) @ w.transpose(2, 0, 1, 3).reshape(cin, 9 * cout)).reshape(n, h, wd, 3, 3, cout)
    out = np.zeros((n, h + 2, wd + 2, cout))
    for i in range(3):
        for j in range(3):
            # y at (p, q) feeds out at (p - i + 1, q - j + 1), i.e. padded (p + 2 - i, q + 2 - j)
            out[:, 2 - i:2 - i + h, 2 - j:2 - j + wd, :] += y[:, :, :, i, j, :]
    return out[:, 1:-1, 1:-1, :], None


def _conv_weight(x: np.ndarray, g: np.ndarray, cols: np.ndarray | None) -> np.ndarray:
    cin, cout = x.shape[3], g.shape[3]
    if cols is not None or cin <= cout:
        cols = _im2col(x) if cols is None else cols
        return (cols.T @ g.reshape(-1, cout)).reshape(3, 3, cin, cout)
    # patches of g instead: dW[i, j] pairs x with g shifted by (1 - i, 1 - j)
    gcols = _im2col(g).reshape(-1, 3, 3, cout)
    d = (x.reshape(-1, cin).T @ gcols.reshape(-1, 9 * cout)).reshape(cin, 3, 3, cout)
    return np.ascontiguousarray(d[:, ::-1, ::-1, :].transpose(1, 2, 0, 3))


class Conv2d(Op):
    """3x3 convolution, stride 1, zero 'same' padding, NHWC / (3,3,Cin,Cout)."""

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
            raise ShapeError(f"Conv2d: input {x.shape} incompatible with kernel {w.shape}")
        out, self.cols = _conv_same(x, w)
        return out

    def vjp(self, g, out, x, w):
        gx = conv2d(g, FlipKernel()(w)) if x.requires_grad else None
        gw = Conv2dWeight(self.cols)(x, g) if w.requires_grad else None
        return gx, gw


class Conv2dWeight(Op):
    """Kernel gradient of ``Conv2d``: sum over positions of patch(x) * g."""

    def __init__(self, cols: np.ndarray | None = None):
        self.cols = cols

    def forward(self, x, g):
        if x.ndim != 4 or x.shape[:3] != g.shape[:3]:
            raise ShapeError(f"Conv2dWeight: input {x.shape} and output grad {g.shape} disagree")
        return _conv_weight(x, g, self.cols)

    def vjp(self, d, out, x, g):
        gx = conv2d(g, FlipKernel()(d)) if x.requires_grad else None
        gg = Conv2d()(x, d) if g.requires_grad else None
        return gx, gg


class FlipKernel(Op):
    """Rotate a kernel by 180 degrees and swap its channel axes (an involution)."""

    def forward(self, w):
        return np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))

    def vjp(self, g, out, w):
        return (FlipKernel()(g),)


class Gather(Op):
    """Pick ``a.ravel()[index]``; ``index`` must hold distinct positions."""

    def __init__(self, index: np.ndarray, out_shape: tuple[int, ...]):
        self.index = index
        self.out_shape = out_shape

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(-1)[self.index].reshape(self.out_shape)

    def vjp(self, g, out, a):
        return (Scatter(self.index, self.in_shape)(g),)


class Scatter(Op):
    def __init__(self, index: np.ndarray, out_shape: tuple[int, ...]):
        self.index = index
        self.out_shape = out_shape

    def forward(self, g):
        self.in_shape = g.shape
        z = np.zeros(int(np.prod(self.out_shape)))
        z[self.index] = g.reshape(-1)
        return z.reshape(self.out_shape)

    def vjp(self, d, out, g):
        return (Gather(self.index, self.in_shape)(d),)


class LogSoftmax(Op):
    def forward(self, z):
        m = z.max(axis=-1, keepdims=True)
        s = z - m
        return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def vjp(self, g, out, z):
        last = (g.ndim - 1,)
        return (g - exp(out) * Expand(g.shape, last)(SumAxes(last)(g)),)


# --- functional front end -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    return Exp()(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul()(a, b)


def transpose(a: Tensor) -> Tensor:
    return Transpose()(a)


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape(shape)(a)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return AddBias()(x, b)


def sum_axes(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % a.ndim for ax in axes) if a.ndim else ()
    return SumAxes(axes)(a)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return sum_axes(a, None)


def expand(a: Tensor, shape, axes) -> Tensor:
    return Expand(tuple(shape), tuple(axes))(a)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner products of two (N, D) tensors."""
    return sum_axes(a * b, 1)


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    return MaskMul(np.asarray(mask, dtype=np.float64))(a)


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    return MaskMul((a.value > 0).astype(np.float64))(a)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    return MaskMul(np.where(a.value > 0, 1.0, slope))(a)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    return Conv2d()(x, w)


def _window_flat_index(shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = h // 2, w // 2
    flat = np.arange(int(np.prod(shape))).reshape(shape)[:, : 2 * ho, : 2 * wo, :]
    return flat.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)


def pool_windows(value: np.ndarray) -> np.ndarray:
    """(N,H,W,C) -> (N,H//2,W//2,C,4) values of each 2x2 pooling window."""
    return value.reshape(-1)[_window_flat_index(value.shape)]


def pool_index(value: np.ndarray) -> np.ndarray:
    """Flat positions of the selected maxima; ties resolve to the first element."""
    if value.ndim != 4:
        raise ShapeError(f"MaxPool2d: expected NHWC input, got {value.shape}")
    if value.shape[1] < 2 or value.shape[2] < 2:
        raise ShapeError(f"MaxPool2d: spatial size {value.shape[1:3]} too small")
    n, h, w, c = value.shape
    ho, wo = h // 2, w // 2
    win = value[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    # window elements in row-major order; strict '>' keeps the first of tied maxima
    best = win[:, :, 0, :, 0, :]
    offset = np.zeros(best.shape, dtype=np.intp)
    for di, dj in ((0, 1), (1, 0), (1, 1)):
        cand = win[:, :, di, :, dj, :]
        up = cand > best
        best = np.where(up, cand, best)
        offset[up] = di * w * c + dj * c
    base = (np.arange(n)[:, None, None, None] * h + 2 * np.arange(ho)[None, :, None, None]) * w * c \
        + 2 * np.arange(wo)[None, None, :, None] * c + np.arange(c)
    return (base + offset).reshape(-1)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with floor semantics."""
    index = pool_index(x.value)
    n, h, w, c = x.shape
    return Gather(index, (n, h // 2, w // 2, c))(x)


def log_softmax(z: Tensor) -> Tensor:
    return LogSoftmax()(z)


# --- differentiation ------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(
    root: Tensor,
    wrt: Sequence[Tensor],
    seed: np.ndarray | Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``root`` with ``seed`` for every tensor in ``wrt``.

    Without ``seed`` the root must be a scalar. With ``create_graph`` the
    returned tensors are graph nodes and can be differentiated again.
    Unreachable inputs get zero gradients.
    """
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"gradient of non-scalar root with shape {root.shape} needs a seed")
        seed = np.ones(root.shape)
    seed_t = _as_tensor(seed)
    if seed_t.shape != root.shape:
        raise ShapeError(f"seed shape {seed_t.shape} does not match root shape {root.shape}")

    grads: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = seed_t
        with _set_recording(create_graph):
            for node in reversed(_topo_order(root)):
                g = grads.get(id(node))
                if g is None or node.op is None:
                    continue
                for parent, pg in zip(node.parents, node.op.vjp(g, node, *node.parents)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for t in wrt:
        if t is root:
            out.append(seed_t)
        else:
            out.append(grads.get(id(t), Tensor(np.zeros(t.shape))))
    return out


class Graph:
    """A scalar expression over named leaves, traced by calling ``fn``.

    ``fn`` receives one Tensor per name in ``variables`` (as keyword
    arguments) and returns the root Tensor. Each ``forward_eval`` retraces,
    so re-evaluation with the same leaf values repeats the same arithmetic.
    """

    def __init__(self, fn: Callable[..., Tensor], variables: Iterable[str]):
        self.fn = fn
        self.variables = tuple(variables)
        self.leaves: dict[str, Tensor] = {}
        self.root: Tensor | None = None


def forward_eval(graph: Graph, leaf_values: Mapping[str, object]) -> Tensor:
    missing = [v for v in graph.variables if v not in leaf_values]
    if missing:
        raise KeyError(f"unbound leaves: {', '.join(missing)}")
    graph.leaves = {
        v: Tensor(np.array(leaf_values[v], dtype=np.float64), requires_grad=True, name=v)
        for v in graph.variables
    }
    with enable_grad():
        graph.root = graph.fn(**graph.leaves)
    return graph.root


def grad(graph: Graph, wrt: Iterable[str], create_graph: bool = True) -> dict[str, Tensor]:
    """Gradients of the traced scalar root with respect to named leaves."""
    if graph.root is None:
        raise RuntimeError("graph has not been evaluated; call forward_eval first")
    names = list(wrt)
    unknown = [n for n in names if n not in graph.leaves]
    if unknown:
        raise KeyError(f"not a leaf of this graph: {', '.join(unknown)}")
    gs = gradients(graph.root, [graph.leaves[n] for n in names], create_graph=create_graph)
    return dict(zip(names, gs))


def grad_of_grad(penalty_graph: Graph, wrt: Iterable[str]) -> dict[str, Tensor]:
    """Gradients of a root built from first-order gradient nodes.

    Identical machinery to :func:`grad`; the first-order gradients inside the
    penalty must have been built with ``create_graph=True``.
    """
    return grad(penalty_graph, wrt, create_graph=False)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x,
    h: float = 1e-5,
    analytic: np.ndarray | None = None,
    floor: float = 1e-8,
) -> float:
    """Max coordinate-wise relative error between an analytic gradient and
    central differences of ``f`` around ``x``.

    If ``analytic`` is omitted, ``f`` is traced with this engine and
    differentiated. The relative error of coordinate k is
    ``|a_k - n_k| / max(|a_k|, |n_k|, floor * max(1, max|n|))``.
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        t = Tensor(x, requires_grad=True)
        with enable_grad():
            root = f(t)
        (ga,) = gradients(root, [t])
        analytic = ga.value
        call = lambda v: float(f(Tensor(v)).value)  # noqa: E731
    else:
        call = lambda v: float(f(v))  # noqa: E731
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = call(x)
        flat[k] = old - h
        fm = call(x)
        flat[k] = old
        num_flat[k] = (fp - fm) / (2 * h)
    scale = floor * max(1.0, float(np.abs(numeric).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
