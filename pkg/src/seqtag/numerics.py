"""Small dense-array kernel with reverse-mode gradients.

Only the operations the tagger and the character language models need are
provided. Every op takes :class:`Tensor` or plain ``numpy`` arrays and returns a
:class:`Tensor`; when none of the inputs requires a gradient no graph edge is
recorded, so the same code runs as a plain numpy forward pass.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ContractViolation(ValueError):
    """Raised when an op is called with arguments outside its contract."""


class TrainingFault(RuntimeError):
    """Raised when training produces non-finite values."""


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str, requires_grad: bool = True):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, tuple(parents), backward)
    return Tensor(value)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


# ---------------------------------------------------------------------------
# core ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _require(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require(
        a.value.ndim == 2 and b.value.ndim == 2 and a.shape[1] == b.shape[0],
        f"matmul: incompatible shapes {a.shape} @ {b.shape}",
    )
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def matvec(w, x) -> Tensor:
    w, x = as_tensor(w), as_tensor(x)
    _require(
        w.value.ndim == 2 and x.value.ndim == 1 and w.shape[1] == x.shape[0],
        f"matvec: incompatible shapes {w.shape} . {x.shape}",
    )
    wv, xv = w.value, x.value
    return _node(wv @ xv, (w, x), lambda g: (np.outer(g, xv), wv.T @ g))


def linear(w, x, b) -> Tensor:
    """``W·x + b`` for a vector ``x``, or ``x·Wᵀ + b`` row-wise for a batch."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    wv, xv, bv = w.value, x.value, b.value
    _require(wv.ndim == 2 and bv.shape == (wv.shape[0],), f"linear: bad weight/bias {w.shape}, {b.shape}")
    _require(xv.shape[-1] == wv.shape[1], f"linear: input {x.shape} does not fit weight {w.shape}")
    if xv.ndim == 1:
        return _node(wv @ xv + bv, (w, x, b), lambda g: (np.outer(g, xv), wv.T @ g, g))
    _require(xv.ndim == 2, "linear: input must be 1-D or 2-D")
    return _node(xv @ wv.T + bv, (w, x, b), lambda g: (g.T @ xv, g @ wv, g.sum(axis=0)))


def concat(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    _require(len(parts) > 0, "concat: nothing to concatenate")
    lead = parts[0].shape[:-1]
    _require(all(p.shape[:-1] == lead for p in parts), "concat: leading shapes differ")
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _node(np.concatenate([p.value for p in parts], axis=-1), parts, backward)


def stack(rows: Sequence) -> Tensor:
    """Stack equal-length vectors into the rows of a matrix."""
    rows = [as_tensor(r) for r in rows]
    _require(len(rows) > 0 and all(r.value.ndim == 1 for r in rows), "stack: expects 1-D tensors")
    _require(len({r.shape for r in rows}) == 1, "stack: rows differ in length")
    return _node(np.stack([r.value for r in rows]), rows, lambda g: tuple(g))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def _lse(v: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(x, axis=None) -> Tensor:
    """Stable ``max + log Σ exp(x − max)``; reduces everything when ``axis`` is None."""
    x = as_tensor(x)
    out = _lse(x.value, axis=axis)
    xv = x.value

    def backward(g):
        full = _lse(xv, axis=axis, keepdims=True)
        gx = np.expand_dims(g, axis) if axis is not None else g
        return (gx * np.exp(xv - full),)

    return _node(out, (x,), backward)


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    x = as_tensor(x)
    out = x.value - _lse(x.value, axis=-1, keepdims=True)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    _require(0.0 <= p < 1.0, f"dropout: p must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    _require(rng is not None, "dropout: training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.value * mask, (x,), lambda g: (g * mask,))


def take(x, index) -> Tensor:
    """Fancy-index ``x[index]``; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(x.value[index], (x,), backward)


def add_to_rows(m, v) -> Tensor:
    """``m[i, :] + v[i]`` for every row ``i``."""
    m, v = as_tensor(m), as_tensor(v)
    _require(m.value.ndim == 2 and v.shape == (m.shape[0],), f"add_to_rows: shapes {m.shape}, {v.shape}")
    return _node(m.value + v.value[:, None], (m, v), lambda g: (g, g.sum(axis=1)))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(np.sum(x.value), (x,), lambda g: (np.full(shape, g),))


def sum_of_squares(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _node(np.sum(xv * xv), (x,), lambda g: (2.0 * g * xv,))


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lv = logits.value
    _require(lv.ndim == 2 and targets.shape == (lv.shape[0],), "cross_entropy: shape mismatch")
    logp = lv - _lse(lv, axis=-1, keepdims=True)
    n = lv.shape[0]
    rows = np.arange(n)

    def backward(g):
        gl = np.exp(logp)
        gl[rows, targets] -= 1.0
        return (gl * (g / n),)

    return _node(-np.mean(logp[rows, targets]), (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``∂loss/∂p`` into ``p.grad`` for every reachable Parameter."""
    _require(isinstance(loss, Tensor) and loss.value.size == 1 and loss.value.ndim == 0,
             "backward: loss must be a scalar tensor")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE)


# ---------------------------------------------------------------------------
# training utilities


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape if len(shape) == 2 else (shape[0], 1)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sgd_step(params: Iterable[Parameter], lr: float, clip_norm: float | None = None) -> None:
    """Plain SGD ``value -= lr * grad`` followed by zeroing the gradients."""
    _require(lr > 0, f"sgd_step: lr must be positive, got {lr}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingFault(f"non-finite gradient in parameter {p.name!r}")
    factor = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
        if norm > clip_norm:
            factor = clip_norm / norm
    for p in params:
        p.value -= (lr * factor) * p.grad
        p.zero_grad()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is re-evaluated after every perturbation, so it must be deterministic.
    When ``max_coords`` is given, that many coordinates are sampled uniformly
    over all parameters; otherwise every coordinate is checked.
    """
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng if rng is not None else make_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p.value[idx]
        p.value[idx] = orig + eps
        up = float(f().value)
        p.value[idx] = orig - eps
        down = float(f().value)
        p.value[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[k][idx])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
