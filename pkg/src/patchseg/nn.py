"""A small numpy layer library: forward/backward layers, softmax cross-entropy,
SGD with momentum and the poly learning-rate policy, and finite-difference checks.

Layers cache what they need during ``forward`` and consume it in ``backward``.
Parameters live in ``layer.params`` (names ``"W"`` and ``"b"``) with matching
``layer.grads``. Convolutions are stride 1 with no padding.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def layer_rng(seed: int, name: str) -> np.random.Generator:
    """Independent init stream per (seed, layer name)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


INIT_GAIN = 6.0


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = math.sqrt(INIT_GAIN / fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class _ConvND(Layer):
    nd = 0

    def __init__(self, cin, cout, kernel, bias=True, name="", seed=0, input_grad=True):
        super().__init__(name)
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.input_grad = input_grad
        rng = layer_rng(seed, self.name)
        self.params["W"] = fan_in_uniform(rng, (cout, cin) + (kernel,) * self.nd, cin * kernel**self.nd)
        if bias:
            self.params["b"] = np.zeros(cout, dtype=np.float32)
        self.zero_grad()

    def _offsets(self, out_sp):
        # one slice tuple per kernel offset, first kernel axis slowest (matches W layout)
        for o in np.ndindex(*(self.kernel,) * self.nd):
            yield (slice(None), slice(None)) + tuple(slice(a, a + n) for a, n in zip(o, out_sp))

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 + self.nd or x.shape[1] != self.cin or min(x.shape[2:]) < self.kernel:
            raise ShapeError(
                f"{self.name}: expected (B, {self.cin}, >= {self.kernel} x{self.nd}), got {x.shape}"
            )
        # im2col with one strided copy per kernel offset, then a single matmul
        B = x.shape[0]
        out_sp = tuple(n - self.kernel + 1 for n in x.shape[2:])
        K = self.kernel**self.nd
        cols = np.empty((self.cin, K, B) + out_sp, dtype=x.dtype)
        for j, sl in enumerate(self._offsets(out_sp)):
            cols[:, j] = x[sl].swapaxes(0, 1)
        self._cols = cols.reshape(self.cin * K, -1)
        self._in_shape = x.shape
        self._out_sp = out_sp
        W = self.params["W"]
        out = (W.reshape(self.cout, -1) @ self._cols).reshape((self.cout, B) + out_sp)
        out = np.moveaxis(out, 0, 1)
        if "b" in self.params:
            out = out + self.params["b"].reshape((-1,) + (1,) * self.nd)
        return np.ascontiguousarray(out)

    def backward(self, g):
        W = self.params["W"]
        gm = np.moveaxis(g, 1, 0).reshape(self.cout, -1)
        self.grads["W"] += (gm @ self._cols.T).reshape(W.shape)
        if "b" in self.params:
            self.grads["b"] += g.sum(axis=(0,) + tuple(range(2, 2 + self.nd)))
        self._cols = None
        if not self.input_grad:
            return None
        B = self._in_shape[0]
        dcols = (W.reshape(self.cout, -1).T @ gm).reshape(
            (self.cin, self.kernel**self.nd, B) + self._out_sp
        )
        dx = np.zeros(self._in_shape, dtype=g.dtype)
        for j, sl in enumerate(self._offsets(self._out_sp)):
            dx[sl] += dcols[:, j].swapaxes(0, 1)
        return dx


class Conv2D(_ConvND):
    kind = "conv2d"
    nd = 2


class Conv3D(_ConvND):
    kind = "conv3d"
    nd = 3


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin, nout, bias=True, name="", seed=0, input_grad=True):
        super().__init__(name)
        self.nin, self.nout = nin, nout
        self.input_grad = input_grad
        self.params["W"] = fan_in_uniform(layer_rng(seed, self.name), (nin, nout), nin)
        if bias:
            self.params["b"] = np.zeros(nout, dtype=np.float32)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.nin:
            raise ShapeError(f"{self.name}: expected (B, {self.nin}), got {x.shape}")
        self._x = x
        out = x @ self.params["W"]
        if "b" in self.params:
            out = out + self.params["b"]
        return out

    def backward(self, g):
        self.grads["W"] += self._x.T @ g
        if "b" in self.params:
            self.grads["b"] += g.sum(axis=0)
        return g @ self.params["W"].T if self.input_grad else None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._mask, g, 0).astype(g.dtype, copy=False)


class Dropout(Layer):
    """Inverted dropout: zero with probability p and rescale by 1/(1-p) in training."""

    kind = "dropout"

    def __init__(self, p=0.5, name=""):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._scale = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.p
        self._scale = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._scale

    def backward(self, g):
        return g if self._scale is None else g * self._scale


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, g):
        return g.reshape(self._shape)


class Concat(Layer):
    """Joins a list of inputs along axis 1."""

    kind = "concat"

    def forward(self, xs, train=False, rng=None):
        xs = list(xs)
        tails = {x.shape[2:] for x in xs}
        if len(tails) != 1 or len({len(x) for x in xs}) != 1:
            raise ShapeError(f"{self.name}: incompatible shapes {[x.shape for x in xs]}")
        self._splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, g):
        return np.split(g, self._splits, axis=1)


class Add(Layer):
    kind = "add"

    def forward(self, xs, train=False, rng=None):
        xs = list(xs)
        if len({x.shape for x in xs}) != 1:
            raise ShapeError(f"{self.name}: shapes differ {[x.shape for x in xs]}")
        self._n = len(xs)
        return sum(xs[1:], xs[0])

    def backward(self, g):
        return [g] * self._n


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        self._s = softmax(x)
        return self._s

    def backward(self, g):
        s = self._s
        return s * (g - (g * s).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(scores, target, class_weights=None):
    """Weighted cross-entropy of softmax(scores) and its gradient w.r.t. scores.

    Accepts one score vector with an int target, or a batch (B, L) with (B,)
    targets; batch losses are averaged over B.
    """
    scores = np.asarray(scores)
    single = scores.ndim == 1
    z = np.atleast_2d(scores)
    t = np.atleast_1d(np.asarray(target))
    n_cls = z.shape[1]
    if t.shape != (len(z),):
        raise ShapeError(f"targets {t.shape} do not match scores {z.shape}")
    if np.any((t < 0) | (t >= n_cls)):
        raise ValueError(f"target out of range [0, {n_cls}): {t[(t < 0) | (t >= n_cls)]}")
    w = np.ones(len(z), dtype=z.dtype) if class_weights is None else np.asarray(class_weights, dtype=z.dtype)[t]
    logp = log_softmax(z)
    rows = np.arange(len(z))
    loss = -(w * logp[rows, t]).mean()
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    grad *= (w / len(z))[:, None]
    if single:
        return float(loss), grad[0]
    return float(loss), grad


# -- optimisation ------------------------------------------------------------


@dataclass
class OptimState:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    power: float = 0.9
    max_iter: int = 1
    iteration: int = 0
    velocities: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def poly_lr(iteration: int, state: OptimState) -> float:
    """lr0 * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= state.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {state.max_iter}]")
    return state.lr0 * (1.0 - iteration / state.max_iter) ** state.power


def is_bias(name: str) -> bool:
    return name.endswith(".b")


def sgd_step(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> None:
    """In-place momentum SGD: v <- mu v - lr (g + decay w); w <- w + v.

    Weight decay skips biases (names ending in ``.b``). ``lr`` defaults to the
    poly schedule at ``state.iteration``.
    """
    lr = poly_lr(state.iteration, state) if lr is None else lr
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if state.weight_decay and not is_bias(name):
            g = g + state.weight_decay * w
        v = state.velocities.get(name)
        if v is None:
            v = state.velocities[name] = np.zeros_like(w)
        v *= state.momentum
        v -= (lr * g).astype(v.dtype)
        w += v


def l2_penalty(params: dict, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(
        float(np.sum(np.square(p, dtype=np.float64))) for n, p in params.items() if not is_bias(n)
    )


# -- finite differences ------------------------------------------------------


def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_grad(loss_fn, arr: np.ndarray, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``arr`` (perturbed in place).

    ``index`` restricts the check to those flat positions; the result then has
    one entry per position instead of the shape of ``arr``.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size) if index is None else np.asarray(index)
    out = np.zeros(len(idx), dtype=np.float64)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn()
        flat[i] = old - eps
        lm = loss_fn()
        flat[i] = old
        out[j] = (lp - lm) / (2 * eps)
    return out.reshape(arr.shape) if index is None else out


def grad_check_arrays(loss_fn, arrays: dict, analytic: dict, eps: float = 1e-5,
                      max_entries: int | None = None, rng=None) -> dict:
    """Max relative error per named array of ``analytic`` against central differences.

    With ``max_entries`` each array larger than that is checked on a random
    subset of that many positions drawn from ``rng``.
    """
    out = {}
    for name, arr in arrays.items():
        a = np.asarray(analytic[name]).reshape(-1)
        index = None
        if max_entries is not None and arr.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            index = np.sort(rng.choice(arr.size, max_entries, replace=False))
            a = a[index]
        num = numeric_grad(loss_fn, arr, eps, index).reshape(-1)
        out[name] = float(relative_error(a, num).max(initial=0.0))
    return out


def layer_grad_check(layer: Layer, inputs, seed: int = 0, eps: float = 1e-5) -> float:
    """Check a layer's input and parameter gradients in float64.

    The scalar loss is sum(r * layer(inputs)) with a fixed random r. ``inputs``
    is an array, or a list of arrays for concat/add.
    """
    rng = np.random.default_rng(seed)
    layer.astype(np.float64)
    multi = isinstance(inputs, (list, tuple))
    xs = [np.array(x, dtype=np.float64) for x in (inputs if multi else [inputs])]
    drop_seed = int(rng.integers(1 << 31))
    train = isinstance(layer, Dropout)

    def run():
        arg = xs if multi else xs[0]
        return layer.forward(arg, train=train, rng=np.random.default_rng(drop_seed))

    r = rng.standard_normal(run().shape)
    loss_fn = lambda: float(np.sum(r * run()))
    layer.zero_grad()
    run()
    dx = layer.backward(r)
    dx = dx if multi else [dx]
    analytic = {f"input{i}": d for i, d in enumerate(dx) if d is not None}
    arrays = {f"input{i}": x for i, x in enumerate(xs) if dx[i] is not None}
    analytic.update({f"param.{k}": g.copy() for k, g in layer.grads.items()})
    arrays.update({f"param.{k}": p for k, p in layer.params.items()})
    errs = grad_check_arrays(loss_fn, arrays, analytic, eps)
    return max(errs.values(), default=0.0)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Rescale all gradients in place so their global L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
