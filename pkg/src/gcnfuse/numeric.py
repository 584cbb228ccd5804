"""Dense double-precision kernels and a small reverse-mode tape.

Every matrix is a 2-D ``float64`` numpy array.  ``matmul`` accumulates the
inner dimension in a fixed sequential order (no BLAS), so a row of the result
depends only on that row of the left operand.  This is what makes node-wise
oracles and permutation checks bit-exact.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with sequential accumulation over the inner index.

    ``out[i, j] = ((0 + a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...`` exactly, with
    each product rounded before it is added.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out


def batched_matmul(a, b) -> np.ndarray:
    """Multiply each ``a[i]`` (p x k) by the shared ``b`` (k x m).

    Each item is an independent BLAS call with identical shapes, so an item's
    result does not depend on where it sits in the batch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 2 or a.shape[2] != b.shape[0]:
        raise ShapeError(f"cannot multiply batch {a.shape} by {b.shape}")
    out = np.empty((a.shape[0], a.shape[1], b.shape[1]))
    for i in range(a.shape[0]):
        out[i] = a[i] @ b
    return out


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax_rows(x) -> np.ndarray:
    x = as_matrix(x)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _check_supervision(n_rows: int, labels, mask):
    labels = np.asarray(labels, dtype=np.int64)
    if mask is None:
        mask = np.ones(n_rows, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != (n_rows,) or mask.shape != (n_rows,):
        raise ShapeError(
            f"labels {labels.shape} and mask {mask.shape} must both have length {n_rows}"
        )
    if not mask.any():
        raise ValueError("mask selects no supervised nodes")
    return labels, mask


def cross_entropy_loss(probs, labels, mask=None) -> float:
    """Mean negative log-probability of the true class over masked rows."""
    probs = as_matrix(probs)
    labels, mask = _check_supervision(probs.shape[0], labels, mask)
    if labels[mask].min() < 0 or labels[mask].max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in [0, {probs.shape[1]})")
    rows = np.flatnonzero(mask)
    picked = np.maximum(probs[rows, labels[rows]], np.finfo(float).tiny)
    return float(-np.log(picked).sum() / rows.size)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"vectors differ in length: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape or (fan_in, fan_out))


def derive_seed(seed: int, *stage) -> int:
    """Per-stage seed: first 8 bytes of sha256("<seed>/<stage>/...")."""
    key = "/".join([str(int(seed))] + [str(s) for s in stage])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def make_rng(seed: int, *stage) -> np.random.Generator:
    # PCG64 has a fixed, platform-independent stream.
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *stage)))


# -- reverse mode ----------------------------------------------------------


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "index", "needs_grad")

    def __init__(self, value: np.ndarray, index: int, needs_grad: bool):
        self.value = value
        self.index = index
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Linear record of a forward computation.

    Parameters are registered by name; ``backward`` walks the record in
    reverse and returns one gradient per registered parameter.
    """

    def __init__(self):
        self._vars: list[Var] = []
        self._ops: list[tuple[int, tuple[int, ...], Vjp]] = []
        self.params: dict[str, Var] = {}

    def _new(self, value, needs_grad) -> Var:
        var = Var(np.asarray(value, dtype=np.float64), len(self._vars), needs_grad)
        self._vars.append(var)
        return var

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        var = self._new(np.array(value, dtype=np.float64), True)
        self.params[name] = var
        return var

    def const(self, value) -> Var:
        return self._new(value, False)

    def custom(self, value, parents: Sequence[Var], vjp: Vjp) -> Var:
        """Record an op whose vector-Jacobian product is ``vjp``.

        ``vjp(g)`` receives the output gradient and returns one gradient (or
        None) per parent, in order.
        """
        needs = any(p.needs_grad for p in parents)
        out = self._new(value, needs)
        if needs:
            self._ops.append((out.index, tuple(p.index for p in parents), vjp))
        return out

    # -- primitive ops --

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.custom(
            matmul(av, bv), (a, b), lambda g: (matmul(g, bv.T), matmul(av.T, g))
        )

    def add_bias(self, a: Var, bias: Var) -> Var:
        """``a + bias`` with ``bias`` broadcast across rows (or a same-shape add)."""
        shape = bias.value.shape
        return self.custom(
            a.value + bias.value,
            (a, bias),
            lambda g: (g, g.reshape((-1,) + shape).sum(axis=0).reshape(shape)),
        )

    def add(self, a: Var, b: Var) -> Var:
        return self.custom(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, a: Var, c: float) -> Var:
        return self.custom(a.value * c, (a,), lambda g: (g * c,))

    def relu(self, a: Var) -> Var:
        on = a.value > 0
        return self.custom(relu(a.value), (a,), lambda g: (g * on,))

    def concat_cols(self, a: Var, b: Var) -> Var:
        k = a.value.shape[1]
        return self.custom(
            np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:])
        )

    def reshape(self, a: Var, shape) -> Var:
        old = a.value.shape
        return self.custom(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def sum(self, a: Var) -> Var:
        shape = a.value.shape
        return self.custom(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))

    def pick(self, a: Var, index) -> Var:
        """Scalar ``a[index]``."""
        shape = a.value.shape

        def vjp(g):
            out = np.zeros(shape)
            out[index] = float(g)
            return (out,)

        return self.custom(np.array(a.value[index]), (a,), vjp)

    def softmax_rows(self, a: Var) -> Var:
        p = softmax_rows(a.value)
        return self.custom(p, (a,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))

    def cross_entropy(self, probs: Var, labels, mask=None) -> Var:
        p = probs.value
        labels, mask = _check_supervision(p.shape[0], labels, mask)
        loss = cross_entropy_loss(p, labels, mask)
        rows = np.flatnonzero(mask)

        def vjp(g):
            out = np.zeros_like(p)
            picked = np.maximum(p[rows, labels[rows]], np.finfo(float).tiny)
            out[rows, labels[rows]] = -float(g) / (picked * rows.size)
            return (out,)

        return self.custom(np.array(loss), (probs,), vjp)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` for every registered parameter."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape._vars)
    grads[loss.index] = np.ones_like(loss.value)
    for out, parents, vjp in reversed(tape._ops):
        g = grads[out]
        if g is None:
            continue
        for idx, pg in zip(parents, vjp(g)):
            if pg is None or not tape._vars[idx].needs_grad:
                continue
            grads[idx] = pg if grads[idx] is None else grads[idx] + pg
    return {
        name: (np.zeros_like(var.value) if grads[var.index] is None else grads[var.index])
        for name, var in tape.params.items()
    }
