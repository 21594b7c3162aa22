"""Minimal reverse-mode autodiff over numpy arrays.

Supplies exactly the operations the style encoders and training losses
need: dense matmul, elementwise arithmetic, pooling, normalization,
embedding lookup, the stabilized cross-entropy losses, and a
gradient-reversal node for adversarial training.  Everything runs in
float64; gradients are verified against central finite differences by
``gradcheck`` and the test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(ValueError):
    """Input is outside an op's numerically safe domain (e.g. zero norm)."""


class ContractError(ValueError):
    """An op was called in a way its contract forbids (e.g. non-scalar loss)."""


NORM_FLOOR = 1e-12
PROB_CLAMP = 1e-12


class Tensor:
    """A node in the computation graph.

    ``values`` is a float64 ndarray.  ``grad`` starts as None and is
    allocated zero-filled on first accumulation; repeated backward calls
    without ``zero_grad`` keep accumulating additively.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad or self._parents != ()

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(op={self._op}, shape={self.values.shape})"


def _node(values, parents, backward, op) -> Tensor:
    out = Tensor(values)
    if any(p.needs_grad for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op + "(const)"
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul shapes {a.values.shape} x {b.values.shape}")
    av, bv = a.values, b.values

    def backward(g):
        if a.needs_grad:
            a.accumulate(g @ bv.T)
        if b.needs_grad:
            b.accumulate(av.T @ g)

    return _node(av @ bv, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ShapeError(f"add shapes {a.values.shape} + {b.values.shape}") from exc

    def backward(g):
        if a.needs_grad:
            a.accumulate(_unbroadcast(g, a.values.shape))
        if b.needs_grad:
            b.accumulate(_unbroadcast(g, b.values.shape))

    return _node(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.values * b.values
    except ValueError as exc:
        raise ShapeError(f"mul shapes {a.values.shape} * {b.values.shape}") from exc
    av, bv = a.values, b.values

    def backward(g):
        if a.needs_grad:
            a.accumulate(_unbroadcast(g * bv, a.values.shape))
        if b.needs_grad:
            b.accumulate(_unbroadcast(g * av, b.values.shape))

    return _node(out, (a, b), backward, "mul")


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if x.needs_grad:
            x.accumulate(g * c)

    return _node(x.values * c, (x,), backward, "scalar_mul")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0  # subgradient at 0 is 0

    def backward(g):
        if x.needs_grad:
            x.accumulate(g * mask)

    return _node(np.where(mask, x.values, 0.0), (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def backward(g):
        if x.needs_grad:
            x.accumulate(g * out)

    return _node(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise DegenerateInputError("log requires strictly positive input")
    xv = x.values

    def backward(g):
        if x.needs_grad:
            x.accumulate(g / xv)

    return _node(np.log(xv), (x,), backward, "log")


def sigmoid(x: Tensor) -> Tensor:
    xv = x.values
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.needs_grad:
            x.accumulate(g * out * (1.0 - out))

    return _node(out, (x,), backward, "sigmoid")


def clip_max(x: Tensor, cap: float) -> Tensor:
    cap = float(cap)
    mask = x.values < cap

    def backward(g):
        if x.needs_grad:
            x.accumulate(g * mask)

    return _node(np.minimum(x.values, cap), (x,), backward, "clip_max")


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.values.shape}")

    def backward(g):
        if x.needs_grad:
            x.accumulate(g.T)

    return _node(x.values.T.copy(), (x,), backward, "transpose")


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    n = x.values.shape[axis]

    def backward(g):
        if x.needs_grad:
            x.accumulate(np.expand_dims(g, axis).repeat(n, axis=axis) / n)

    return _node(x.values.mean(axis=axis), (x,), backward, "mean_over_axis")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        if x.needs_grad:
            x.accumulate(np.full_like(x.values, float(g)))

    return _node(np.asarray(x.values.sum()), (x,), backward, "sum_all")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norms = np.linalg.norm(x.values, axis=axis, keepdims=True)
    if np.any(norms <= NORM_FLOOR):
        raise DegenerateInputError("l2_normalize input has (near-)zero norm")
    out = x.values / norms

    def backward(g):
        if x.needs_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x.accumulate((g - out * inner) / norms)

    return _node(out, (x,), backward, "l2_normalize")


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("embedding_lookup expects a nonempty 1-d id sequence")
    if idx.min() < 0 or idx.max() >= table.values.shape[0]:
        raise IndexError(f"token id out of range [0, {table.values.shape[0]})")

    def backward(g):
        if table.needs_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, idx, g)

    return _node(table.values[idx], (table,), backward, "embedding_lookup")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of zero tensors")
    sizes = [x.values.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.needs_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x.accumulate(g[tuple(sl)])

    return _node(np.concatenate([x.values for x in xs], axis=axis), tuple(xs), backward, "concat")


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], log-sum-exp stabilized."""
    if logits.values.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (N, C) logits")
    tgt = np.asarray(targets, dtype=np.int64)
    n, c = logits.values.shape
    if tgt.shape != (n,):
        raise ShapeError(f"target shape {tgt.shape} does not match batch {n}")
    if tgt.min() < 0 or tgt.max() >= c:
        raise IndexError(f"target class out of range [0, {c})")
    lv = logits.values
    m = lv.max(axis=1, keepdims=True)
    shifted = lv - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    losses = lse - lv[np.arange(n), tgt]

    def backward(g):
        if logits.needs_grad:
            soft = np.exp(shifted)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(n), tgt] -= 1.0
            logits.accumulate(soft * (float(g) / n))

    return _node(np.asarray(losses.mean()), (logits,), backward, "softmax_cross_entropy")


def binary_cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -[y log p + (1-y) log(1-p)], probabilities clamped to stay finite."""
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), probs.values.shape)
    p = np.clip(probs.values, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (probs.values > PROB_CLAMP) & (probs.values < 1.0 - PROB_CLAMP)
    losses = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    count = probs.values.size

    def backward(g):
        if probs.needs_grad:
            dp = ((1.0 - y) / (1.0 - p) - y / p) * inside
            probs.accumulate(dp * (float(g) / count))

    return _node(np.asarray(losses.mean()), (probs,), backward, "binary_cross_entropy")


def grad_reverse(x: Tensor) -> Tensor:
    """Identity forward; exact gradient negation backward."""

    def backward(g):
        if x.needs_grad:
            x.accumulate(-g)

    return _node(x.values, (x,), backward, "grad_reverse")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Graph nodes in topological order, root last; deterministic."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable tensor that needs them."""
    if loss.values.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    order = topo_order(loss)
    loss.accumulate(np.ones_like(loss.values))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error |analytic - numeric| / max(1, |numeric|) over coords."""
    probe = Tensor(x.values.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.values)

    numeric = np.zeros_like(probe.values)
    flat = probe.values.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(probe.values)).values)
        flat[i] = orig - h
        lo = float(f(Tensor(probe.values)).values)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
