"""Feedforward ReLU networks with parameters split into linear weights and biases.

Images are channels-last (H, W, C). A network maps one input of
``input_shape`` to a vector of ``n`` logits; every batched helper takes a
leading sample axis. Softmax is never applied here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LayerSpec",
    "Network",
    "dense",
    "conv2d",
    "maxpool",
    "relu",
    "leaky_relu",
    "dropout",
    "flatten",
    "preset",
    "build_network",
    "linear_network",
    "logits",
    "predict",
    "input_gradient",
    "bias_gradient",
    "argmax_lowest",
]

KINDS = ("dense", "conv2d", "maxpool", "relu", "leaky_relu", "dropout", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_size: int = 0
    out_size: int = 0
    has_bias: bool = True
    rate: float = 0.0
    slope: float = 0.01

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def dense(in_size: int, out_size: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", in_size, out_size, bias)


def conv2d(in_channels: int, out_channels: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", in_channels, out_channels, bias)


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool", has_bias=False)


def relu() -> LayerSpec:
    return LayerSpec("relu", has_bias=False)


def leaky_relu(slope: float = 0.01) -> LayerSpec:
    return LayerSpec("leaky_relu", has_bias=False, slope=slope)


def dropout(rate: float) -> LayerSpec:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    return LayerSpec("dropout", has_bias=False, rate=rate)


def flatten() -> LayerSpec:
    return LayerSpec("flatten", has_bias=False)


def preset(name: str) -> tuple[list[LayerSpec], tuple[int, ...]]:
    """Named architectures. ``mnist-paper`` is the three-block MNIST convnet."""
    if name == "mnist-paper":
        layers = [
            conv2d(1, 32), relu(), maxpool(),
            conv2d(32, 64), relu(), maxpool(),
            conv2d(64, 128), relu(), maxpool(),
            flatten(),
            dense(3 * 3 * 128, 128), relu(),
            dropout(0.5),
            dense(128, 10),
        ]
        return layers, (28, 28, 1)
    raise KeyError(f"unknown preset {name!r}")


def _infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for idx, layer in enumerate(layers):
        where = f"layer {idx} ({layer.kind})"
        if layer.kind not in KINDS:
            raise ValueError(f"{where}: unknown layer kind")
        if layer.kind == "dense":
            if len(cur) != 1 or cur[0] != layer.in_size:
                raise ValueError(f"{where}: expects a vector of size {layer.in_size}, got shape {cur}")
            cur = (layer.out_size,)
        elif layer.kind == "conv2d":
            if len(cur) != 3 or cur[2] != layer.in_size:
                raise ValueError(f"{where}: expects (H, W, {layer.in_size}) input, got shape {cur}")
            cur = (cur[0], cur[1], layer.out_size)
        elif layer.kind == "maxpool":
            if len(cur) != 3 or cur[0] < 2 or cur[1] < 2:
                raise ValueError(f"{where}: expects (H, W, C) input with H, W >= 2, got shape {cur}")
            cur = (cur[0] // 2, cur[1] // 2, cur[2])
        elif layer.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif layer.kind == "dropout" and not 0.0 <= layer.rate < 1.0:
            raise ValueError(f"{where}: rate {layer.rate} outside [0, 1)")
        shapes.append(cur)
    if len(cur) != 1 or cur[0] < 2:
        raise ValueError(f"network output must be a vector of at least 2 scores, got shape {cur}")
    return shapes


class Network:
    """Ordered layers plus their parameter arrays.

    ``weights[k]`` / ``bias_arrays[k]`` are ``None`` for parameter-free
    layers and for layers declared without bias.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int],
                 weights: Sequence[np.ndarray | None], bias_arrays: Sequence[np.ndarray | None],
                 mode: str = "eval", meta: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        self.weights = [None if w is None else np.asarray(w, dtype=np.float64) for w in weights]
        self.bias_arrays = [None if b is None else np.asarray(b, dtype=np.float64) for b in bias_arrays]
        self.mode = mode
        self.meta = dict(meta or {})

    # parameters -----------------------------------------------------------

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def theta(self) -> list[np.ndarray]:
        return [w for w in self.weights if w is not None]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for b in self.bias_arrays if b is not None]

    @property
    def bias_free(self) -> bool:
        return not self.biases

    def parameters(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order (weight, then bias, per layer)."""
        out = []
        for w, b in zip(self.weights, self.bias_arrays):
            if w is not None:
                out.append(w)
            if b is not None:
                out.append(b)
        return out

    def parameter_roles(self) -> list[str]:
        roles = []
        for w, b in zip(self.weights, self.bias_arrays):
            if w is not None:
                roles.append("theta")
            if b is not None:
                roles.append("bias")
        return roles

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        it = iter(params)
        for k in range(len(self.layers)):
            if self.weights[k] is not None:
                self.weights[k] = np.array(next(it), dtype=np.float64).reshape(self.weights[k].shape)
            if self.bias_arrays[k] is not None:
                self.bias_arrays[k] = np.array(next(it), dtype=np.float64).reshape(self.bias_arrays[k].shape)

    def copy(self) -> "Network":
        return Network(self.layers, self.input_shape,
                       [None if w is None else w.copy() for w in self.weights],
                       [None if b is None else b.copy() for b in self.bias_arrays],
                       self.mode, self.meta)

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    # evaluation -----------------------------------------------------------

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"input batch shape {x.shape} does not match input shape {self.input_shape}")
        return x

    def forward(self, x: Tensor, params: Sequence[Tensor] | None = None, *,
                train: bool | None = None, rng: np.random.Generator | None = None,
                trace: list | None = None) -> Tensor:
        """Logits for a batch tensor ``x`` of shape (N, *input_shape).

        ``params`` substitutes differentiable parameter tensors in
        :meth:`parameters` order. ``trace`` collects the pre-activations and
        pooling indices that fix the local affine piece.
        """
        if x.shape[1:] != self.input_shape:
            raise ad.ShapeError(f"input batch shape {x.shape} does not match input shape {self.input_shape}")
        train = (self.mode == "train") if train is None else train
        if params is None:
            params = [Tensor(p) for p in self.parameters()]
        it = iter(params)
        h = x
        for k, layer in enumerate(self.layers):
            kind = layer.kind
            if kind == "dense":
                h = h @ next(it)
            elif kind == "conv2d":
                h = ad.conv2d(h, next(it))
            elif kind == "maxpool":
                if trace is not None:
                    trace.append(("pool", h.value))
                h = ad.maxpool2d(h)
            elif kind in ("relu", "leaky_relu"):
                if trace is not None:
                    trace.append(("pre", h.value))
                h = ad.relu(h) if kind == "relu" else ad.leaky_relu(h, layer.slope)
            elif kind == "dropout":
                if train and layer.rate > 0:
                    gen = rng if rng is not None else np.random.default_rng()
                    keep = gen.random(h.shape) >= layer.rate
                    h = ad.mask_mul(h, keep / (1.0 - layer.rate))
            elif kind == "flatten":
                h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
            if layer.has_params and self.bias_arrays[k] is not None:
                h = ad.add_bias(h, next(it))
        return h

    def logits_batch(self, x: np.ndarray) -> np.ndarray:
        x = self._check_batch(x)
        with ad.no_grad():
            return self.forward(Tensor(x), train=False).value

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return argmax_lowest(self.logits_batch(x))

    def vjp_batch(self, x: np.ndarray, seed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logits and ``sum_n seed[n] . dPsi(x_n)/dx_n`` per sample, in eval mode."""
        x = self._check_batch(x)
        xt = Tensor(x, requires_grad=True)
        with ad.enable_grad():
            out = self.forward(xt, train=False)
        (g,) = ad.gradients(out, [xt], seed=np.asarray(seed, dtype=np.float64))
        return out.value, g.value

    def jacobian(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logits (n,) and input gradients of every logit (n, *input_shape) at one point."""
        x = np.asarray(x, dtype=np.float64)
        n = self.n_classes
        rep = np.broadcast_to(x, (n,) + x.shape).copy()
        z, g = self.vjp_batch(rep, np.eye(n))
        return z[0], g

    def _trace(self, x: np.ndarray) -> list:
        trace: list = []
        xt = Tensor(self._check_batch(np.asarray(x, dtype=np.float64)[None]))
        with ad.no_grad():
            self.forward(xt, train=False, trace=trace)
        return trace

    def activation_pattern(self, x: np.ndarray) -> bytes:
        """Bytes identifying the affine piece containing the single input ``x``."""
        parts = []
        for kind, v in self._trace(x):
            parts.append((v > 0).tobytes() if kind == "pre" else ad.pool_index(v).tobytes())
        return b"|".join(parts)

    def kink_margin(self, x: np.ndarray) -> float:
        """Smallest |pre-activation| or live pooling top-2 gap at ``x``.

        Inputs whose margin is well above a finite-difference step lie
        strictly inside one affine piece.
        """
        margins = [np.inf]
        for kind, v in self._trace(x):
            if kind == "pre":
                margins.append(float(np.abs(v).min()))
                continue
            top2 = np.sort(ad.pool_windows(v), axis=-1)[..., -2:].reshape(-1, 2)
            # a tie among all-zero (dead) windows does not change the function
            live = top2[:, 1] > 0
            if live.any():
                margins.append(float((top2[live, 1] - top2[live, 0]).min()))
        return float(min(margins))

    def spec_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers], "input_shape": list(self.input_shape)}


def argmax_lowest(z: np.ndarray) -> np.ndarray | int:
    """Argmax along the last axis; ties go to the lowest index (numpy's rule)."""
    z = np.asarray(z)
    out = np.argmax(z, axis=-1)
    return int(out) if z.ndim == 1 else out


def build_network(spec: str | Sequence[LayerSpec], seed: int = 0,
                  input_shape: Sequence[int] | None = None, bias_scale: float = 0.0) -> Network:
    """Initialise a network with He-scaled Gaussian weights.

    Biases start at zero unless ``bias_scale`` > 0, in which case they are
    drawn from N(0, bias_scale^2).
    """
    if isinstance(spec, str):
        layers, default_shape = preset(spec)
        input_shape = input_shape or default_shape
    else:
        layers = list(spec)
        if input_shape is None:
            first = layers[0]
            if first.kind != "dense":
                raise ValueError("input_shape is required unless the first layer is dense")
            input_shape = (first.in_size,)
    _infer_shapes(layers, tuple(input_shape))
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray | None] = []
    bias_arrays: list[np.ndarray | None] = []
    for layer in layers:
        if layer.kind == "dense":
            shape, fan_in = (layer.in_size, layer.out_size), layer.in_size
        elif layer.kind == "conv2d":
            shape, fan_in = (3, 3, layer.in_size, layer.out_size), 9 * layer.in_size
        else:
            weights.append(None)
            bias_arrays.append(None)
            continue
        weights.append(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
        if layer.has_bias:
            b = rng.standard_normal(layer.out_size) * bias_scale if bias_scale > 0 else np.zeros(layer.out_size)
            bias_arrays.append(b)
        else:
            bias_arrays.append(None)
    net = Network(layers, input_shape, weights, bias_arrays,
                  meta={"seed": seed, "preset": spec if isinstance(spec, str) else None})
    return net


# single-sample front end ----------------------------------------------------


def logits(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match {net.input_shape}")
    return net.logits_batch(x[None])[0]


def predict(net: Network, x) -> int:
    return argmax_lowest(logits(net, x))


def _check_class(net: Network, i: int) -> None:
    if not 0 <= int(i) < net.n_classes:
        raise IndexError(f"class index {i} outside [0, {net.n_classes})")


def input_gradient(net: Network, x, i: int) -> np.ndarray:
    """Gradient of logit ``i`` with respect to the input (the saliency map)."""
    _check_class(net, i)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match {net.input_shape}")
    seed = np.zeros((1, net.n_classes))
    seed[0, i] = 1.0
    return net.vjp_batch(x[None], seed)[1][0]


def bias_gradient(net: Network, x, i: int) -> np.ndarray:
    """Gradient of logit ``i`` with respect to all biases, concatenated in layer order."""
    _check_class(net, i)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match {net.input_shape}")
    params = [Tensor(p, requires_grad=(role == "bias"))
              for p, role in zip(net.parameters(), net.parameter_roles())]
    with ad.enable_grad():
        out = net.forward(Tensor(x[None]), params, train=False)
    bias_params = [p for p, role in zip(params, net.parameter_roles()) if role == "bias"]
    if not bias_params:
        return np.zeros(0)
    seed = np.zeros((1, net.n_classes))
    seed[0, i] = 1.0
    gs = ad.gradients(out, bias_params, seed=seed)
    return np.concatenate([g.value.ravel() for g in gs])


def linear_network(rows, bias=None) -> Network:
    """Affine classifier Psi(x) = W x + b with ``rows`` the class weight vectors W."""
    W = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n, d = W.shape
    layer = dense(d, n, bias=bias is not None)
    b = None if bias is None else np.asarray(bias, dtype=np.float64).reshape(n)
    return Network([layer], (d,), [W.T.copy()], [b], meta={"preset": None})
