"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learnable operation of the recommender is composed from the functions
in this module.  A ``Tensor`` wraps a numpy array; operations on tensors that
require gradients record a closure which pushes the output gradient back to
the inputs.  ``backward`` walks the recorded graph in reverse topological
order.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    """Raised when a loss has no unmasked position to average over."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions follow numpy's matmul rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make(a.data[idx], (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return mul(reduce_sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    factor = np.where(x.data >= 0.0, 1.0, slope)

    def backward(g):
        _accum(x, g * factor)

    return _make(x.data * factor, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0.0

    def backward(g):
        _accum(x, g * on)

    return _make(np.where(on, x.data, 0.0), (x,), backward)


def sin(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, g * np.cos(x.data))

    return _make(np.sin(x.data), (x,), backward)


def softmax(s: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``s``; False entries are
    treated as -inf scores and receive probability zero.
    """
    s = as_tensor(s)
    z = s.data if mask is None else np.where(mask, s.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(s, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (s,), backward)


def softmax_rows(s: Tensor) -> Tensor:
    if s.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {s.shape}")
    return softmax(s)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: "Rng | None") -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accum(x, g * keep)

    return _make(x.data * keep, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def _valid(mask, n: int) -> np.ndarray:
    valid = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if valid.shape[0] != n:
        raise ShapeError(f"mask length {valid.shape[0]} does not match {n} positions")
    if not valid.any():
        raise DegenerateBatchError("every position is masked")
    return valid


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows where the mask is True."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects k x C logits, got {logits.shape}")
    k, n_cls = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    valid = _valid(ignore_mask, k)
    if targets[valid].min() < 0 or targets[valid].max() >= n_cls:
        raise ValueError("target class index out of range")
    safe_t = np.where(valid, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(k), safe_t]
    count = valid.sum()
    loss = float(nll[valid].sum() / count)

    def backward(g):
        probs = np.exp(z - logsum[:, None])
        probs[np.arange(k), safe_t] -= 1.0
        probs *= valid[:, None] / count
        _accum(logits, g * probs)

    return _make(np.array(loss), (logits,), backward)


def mse(pred: Tensor, target, ignore_mask=None) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    flat = pred.data.reshape(-1)
    valid = _valid(ignore_mask, flat.shape[0])
    diff = np.where(valid, flat - target.reshape(-1), 0.0)
    count = valid.sum()

    def backward(g):
        _accum(pred, (g * 2.0 * diff / count).reshape(pred.shape))

    return _make(np.array(float((diff * diff).sum() / count)), (pred,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Propagate d(loss)/d(node) through the tape.

    Leaf gradients accumulate into ``.grad``.  When ``params`` is given the
    return value maps each parameter name to its gradient, with zeros for
    parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior grads are not needed after propagation

    if params is None:
        return None
    table = {}
    for i, p in enumerate(params):
        table[p.name or str(i)] = np.zeros_like(p.data) if p.grad is None else p.grad
    return table


# ---------------------------------------------------------------------------
# random numbers and optimisation


class Rng:
    """Counter-based (Philox) generator; each purpose gets its own stream."""

    STREAMS = {"init": 1, "dropout": 2, "shuffle": 3}

    def __init__(self, seed: int, stream: str | int = 0):
        self.seed = int(seed)
        self.stream = stream
        key = self.STREAMS.get(stream, stream) if isinstance(stream, str) else stream
        if isinstance(key, str):
            raise KeyError(f"unknown rng stream {stream!r}")
        self._bitgen = np.random.Philox(key=[self.seed & (2**64 - 1), int(key)])
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._bitgen.state

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state


def init_weight(rng: Rng, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform((fan_in, fan_out), -bound, bound), name=name)


def init_bias(width: int, name: str) -> Tensor:
    return Parameter(np.zeros(width), name=name)


def init_embedding(rng: Rng, rows: int, width: int, name: str) -> Tensor:
    return Parameter(rng.normal((rows, width), std=0.02), name=name)


class AdamW:
    """Adam with decoupled weight decay.

    The decay step shrinks each parameter by ``lr * weight_decay`` before the
    moment-based update, independently of the gradient.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamW) -> AdamW:
    """Functional wrapper: install ``grads`` on ``params`` and take one step."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=DTYPE)
    state.step()
    return state


# ---------------------------------------------------------------------------
# finite-difference harness


def numeric_grad(fn, param: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(1, max|n|, max|a|); the floor avoids blow-up for tiny gradients."""
    scale = max(1.0, float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def gradcheck(fn, params: Sequence[Tensor], h: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients with central differences; returns relative error per parameter."""
    for p in params:
        p.grad = None
    loss = fn()
    table = backward(loss, params)
    errors = {}
    for i, p in enumerate(params):
        key = p.name or str(i)
        errors[key] = relative_error(table[key].copy(), numeric_grad(fn, p, h))
    for p in params:
        p.grad = None
    return errors
