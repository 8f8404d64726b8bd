"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation records its input tensors and
a vector-Jacobian closure on the output, and ``backward`` replays the records
in reverse creation order. The graph is rebuilt on every forward pass;
gradients accumulate additively into ``Tensor.grad`` until ``zero_grad``.

Supported surface: 2-d matmul, elementwise add (plus row-vector bias
broadcast), relu/tanh, seeded inverted dropout, mean-squared-error and
softmax cross-entropy losses. Enough for multilayer perceptrons with linear
decoder heads; nothing more.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(ValueError):
    """The autodiff graph contract was violated (e.g. non-scalar loss)."""


_CREATION_COUNTER = itertools.count()


class Tensor:
    """A dense float64 array plus a same-shape gradient accumulation buffer.

    ``grad`` is all-zero at creation and after ``zero_grad``; ``backward``
    adds into it, so repeated backward passes accumulate.
    """

    __slots__ = ("values", "grad", "_parents", "_vjp", "_op", "_order")

    def __init__(self, values, _parents=(), _vjp=None, _op="leaf"):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.grad = np.zeros_like(arr)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = _vjp
        self._op = _op
        self._order = next(_CREATION_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _ancestors(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root``, sorted by creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every ancestor of ``loss``.

    The pass runs on a scratch gradient map and only adds its result into the
    tensors at the end, so calling ``backward`` twice adds the derivative
    twice (never more).
    """
    if loss.values.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _ancestors(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t._vjp is None:
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg.copy()
            else:
                acc += pg
    for t in order:
        g = grads.get(id(t))
        if g is not None:
            t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors, recorded for the backward pass."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d bias added to each row of a 2-d tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g

        return Tensor(a.values + b.values, (a, b), vjp, "add")
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)

        return Tensor(a.values + b.values, (a, b), vjp, "add_bias")
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors as a single graph node."""
    if not tensors:
        raise GraphError("add_n of an empty sequence")
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape:
            raise ShapeError(f"add_n shape mismatch: {first.shape} vs {t.shape}")

    def vjp(g):
        return tuple(g for _ in tensors)

    total = tensors[0].values.copy()
    for t in tensors[1:]:
        total += t.values
    return Tensor(total, tuple(tensors), vjp, "add_n")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient flows into the constant)."""
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    return Tensor(a.values * c, (a,), vjp, "scale")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0

    def vjp(g):
        return (g * mask,)

    return Tensor(np.maximum(a.values, 0.0), (a,), vjp, "relu")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp, "tanh")


def _mask_rng(mask_seed) -> np.random.Generator:
    if isinstance(mask_seed, (int, np.integer)):
        entropy = [int(mask_seed)]
    else:
        entropy = [int(s) for s in mask_seed]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(mask_seed, *extra: int) -> tuple[int, ...]:
    """Extend a mask seed with more stream components, keeping determinism."""
    if isinstance(mask_seed, (int, np.integer)):
        base: tuple[int, ...] = (int(mask_seed),)
    else:
        base = tuple(int(s) for s in mask_seed)
    return base + tuple(int(e) for e in extra)


def dropout(x: Tensor, rate: float, mask_seed, training: bool) -> Tensor:
    """Inverted dropout: zero i.i.d. with probability ``rate`` and scale
    survivors by 1/(1-rate) in training mode; exact identity in evaluation
    mode. The mask is fully determined by ``mask_seed``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training:
        return x
    rng = _mask_rng(mask_seed)
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)

    def vjp(g):
        return (g * factor,)

    return Tensor(x.values * factor, (x,), vjp, "dropout")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences (over every element)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = diff.size

    def vjp(g):
        d = g * (2.0 / n) * diff
        return d, -d

    return Tensor(np.float64(np.mean(diff * diff)), (pred, target), vjp, "mse")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true classes.

    ``labels`` is an integer vector of class indices; logits are shifted by
    their row max before exponentiation, so huge logits do not overflow.
    """
    logits = as_tensor(logits)
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects n x c logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise ValueError(f"label {labels[bad]} at row {bad} outside [0, {c})")

    z = logits.values
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    logprob = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -logprob[np.arange(n), labels].mean()

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return Tensor(np.float64(loss), (logits,), vjp, "softmax_ce")


def numeric_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one tensor.

    ``f`` must rebuild the forward pass from current parameter values on each
    call; ``param.values`` is perturbed in place and restored.
    """
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
