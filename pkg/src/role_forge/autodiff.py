"""Reverse-mode differentiation over dense fp64 numpy arrays.

A :class:`Tape` records primitive applications in execution order, which is
already a topological order, so ``backward`` is a single reversed sweep.
Parameters enter a tape as leaves and gradients are read back off the leaves.

Only a small, auditable set of primitives is provided. Broadcasting is limited
to adding a bias over the last axis; anything else must be spelled out with
``gather``/``reshape``/``concat``.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping
from typing import Any

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class DomainError(ValueError):
    """Input lies outside the primitive's domain (e.g. log of a non-positive)."""


class DiffValue:
    """A node on a tape: an fp64 array plus a gradient slot."""

    __slots__ = ("data", "_grad", "requires_grad", "kind", "inputs", "attrs", "name")

    def __init__(self, data, requires_grad=False, kind="leaf", inputs=(), attrs=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK} for shape {arr.shape}")
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"DiffValue({self.kind}, shape={self.shape}, requires_grad={self.requires_grad})"


def _same(a, b, kind):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _bias_ok(a, b, kind):
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not equal and not a last-axis bias")


def _reduce_bias(g, b_shape):
    if g.shape == b_shape:
        return g
    return g.reshape(-1, b_shape[0]).sum(axis=0)


def _positive(x, kind):
    if not np.all(x > 0):
        bad = x[~(x > 0)].reshape(-1)[0]
        raise DomainError(f"{kind}: input must be strictly positive, found {bad!r}")


# Each primitive: (forward(arrays, attrs) -> array, backward(g, arrays, out, attrs) -> grads).
_PRIMS: dict[str, tuple[Callable, Callable]] = {}


def _prim(name):
    def register(pair_fn):
        _PRIMS[name] = pair_fn()
        return pair_fn

    return register


@_prim("matmul")
def _matmul():
    def fwd(xs, at):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
        return a @ b

    def bwd(g, xs, out, at):
        a, b = xs
        return [g @ b.T, a.T @ g]

    return fwd, bwd


@_prim("bmm")
def _bmm():
    def fwd(xs, at):
        a, b = xs
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not align")
        return np.matmul(a, b)

    def bwd(g, xs, out, at):
        a, b = xs
        return [np.matmul(g, b.transpose(0, 2, 1)), np.matmul(a.transpose(0, 2, 1), g)]

    return fwd, bwd


@_prim("add")
def _add():
    def fwd(xs, at):
        a, b = xs
        _bias_ok(a, b, "add")
        return a + b

    def bwd(g, xs, out, at):
        return [g, _reduce_bias(g, xs[1].shape)]

    return fwd, bwd


@_prim("sub")
def _sub():
    def fwd(xs, at):
        a, b = xs
        _bias_ok(a, b, "sub")
        return a - b

    def bwd(g, xs, out, at):
        return [g, -_reduce_bias(g, xs[1].shape)]

    return fwd, bwd


@_prim("mul")
def _mul():
    def fwd(xs, at):
        _same(xs[0], xs[1], "mul")
        return xs[0] * xs[1]

    def bwd(g, xs, out, at):
        return [g * xs[1], g * xs[0]]

    return fwd, bwd


@_prim("div")
def _div():
    def fwd(xs, at):
        _same(xs[0], xs[1], "div")
        if np.any(xs[1] == 0):
            raise DomainError("div: zero denominator")
        return xs[0] / xs[1]

    def bwd(g, xs, out, at):
        return [g / xs[1], -g * out / xs[1]]

    return fwd, bwd


@_prim("scale")
def _scale():
    return (lambda xs, at: xs[0] * at["c"]), (lambda g, xs, out, at: [g * at["c"]])


@_prim("shift")
def _shift():
    return (lambda xs, at: xs[0] + at["c"]), (lambda g, xs, out, at: [g])


@_prim("relu")
def _relu():
    # relu'(0) = 0
    return (lambda xs, at: np.maximum(xs[0], 0.0)), (lambda g, xs, out, at: [g * (xs[0] > 0)])


@_prim("sigmoid")
def _sigmoid():
    def fwd(xs, at):
        x = xs[0]
        # split by sign to avoid exp overflow
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return fwd, (lambda g, xs, out, at: [g * out * (1.0 - out)])


@_prim("tanh")
def _tanh():
    return (lambda xs, at: np.tanh(xs[0])), (lambda g, xs, out, at: [g * (1.0 - out * out)])


@_prim("exp")
def _exp():
    return (lambda xs, at: np.exp(xs[0])), (lambda g, xs, out, at: [g * out])


@_prim("log")
def _log():
    def fwd(xs, at):
        _positive(xs[0], "log")
        return np.log(xs[0])

    return fwd, (lambda g, xs, out, at: [g / xs[0]])


@_prim("square")
def _square():
    return (lambda xs, at: xs[0] * xs[0]), (lambda g, xs, out, at: [2.0 * g * xs[0]])


@_prim("sqrt")
def _sqrt():
    def fwd(xs, at):
        _positive(xs[0], "sqrt")
        return np.sqrt(xs[0])

    return fwd, (lambda g, xs, out, at: [0.5 * g / out])


@_prim("abs")
def _abs():
    # abs'(0) = 0 via sign
    return (lambda xs, at: np.abs(xs[0])), (lambda g, xs, out, at: [g * np.sign(xs[0])])


@_prim("scalar_min")
def _scalar_min():
    # d/dx min(x, c) = 1 at x == c
    return (
        lambda xs, at: np.minimum(xs[0], at["c"]),
        lambda g, xs, out, at: [g * (xs[0] <= at["c"])],
    )


@_prim("clamp_min")
def _clamp_min():
    # d/dx max(x, c) = 1 at x == c
    return (
        lambda xs, at: np.maximum(xs[0], at["c"]),
        lambda g, xs, out, at: [g * (xs[0] >= at["c"])],
    )


def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g.reshape(()) if g.size == 1 else g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


@_prim("sum")
def _sum():
    def fwd(xs, at):
        return np.sum(xs[0], axis=at.get("axis"))

    def bwd(g, xs, out, at):
        return [np.array(_expand_reduced(g, xs[0].shape, at.get("axis")))]

    return fwd, bwd


@_prim("mean")
def _mean():
    def fwd(xs, at):
        return np.mean(xs[0], axis=at.get("axis"))

    def bwd(g, xs, out, at):
        axis = at.get("axis")
        count = xs[0].size if axis is None else xs[0].shape[axis]
        return [np.array(_expand_reduced(g, xs[0].shape, axis)) / count]

    return fwd, bwd


@_prim("frobenius_norm")
def _frob():
    # gradient at the zero vector taken as 0
    def fwd(xs, at):
        return np.sqrt(np.sum(xs[0] * xs[0], axis=at.get("axis")))

    def bwd(g, xs, out, at):
        axis = at.get("axis")
        o = out.reshape(()) if axis is None else np.expand_dims(out, axis)
        gg = g.reshape(()) if axis is None else np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        return [np.where(o > 0, gg * xs[0] / safe, 0.0)]

    return fwd, bwd


@_prim("concat")
def _concat():
    def fwd(xs, at):
        axis = at["axis"]
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(
                d0 != d1 for k, (d0, d1) in enumerate(zip(ref, x.shape)) if k != axis % len(ref)
            ):
                raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
        return np.concatenate(xs, axis=axis)

    def bwd(g, xs, out, at):
        cuts = np.cumsum([x.shape[at["axis"]] for x in xs])[:-1]
        return np.split(g, cuts, axis=at["axis"])

    return fwd, bwd


@_prim("slice")
def _slice():
    def fwd(xs, at):
        return xs[0][at["index"]]

    def bwd(g, xs, out, at):
        full = np.zeros_like(xs[0])
        full[at["index"]] = g
        return [full]

    return fwd, bwd


@_prim("reshape")
def _reshape():
    def fwd(xs, at):
        shape = tuple(at["shape"])
        if int(np.prod(shape)) != xs[0].size:
            raise ShapeError(f"reshape: cannot view {xs[0].shape} as {shape}")
        return xs[0].reshape(shape)

    return fwd, (lambda g, xs, out, at: [g.reshape(xs[0].shape)])


@_prim("gather")
def _gather():
    def fwd(xs, at):
        idx = at["index"]
        if idx.size and (idx.min() < 0 or idx.max() >= xs[0].shape[0]):
            raise ShapeError(f"gather: index out of range for shape {xs[0].shape}")
        return xs[0][idx]

    def bwd(g, xs, out, at):
        full = np.zeros_like(xs[0])
        np.add.at(full, at["index"], g)
        return [full]

    return fwd, bwd


@_prim("take")
def _take():
    def fwd(xs, at):
        x, idx = xs[0], at["index"]
        if x.ndim != 2 or idx.shape != (x.shape[0],):
            raise ShapeError(f"take: shapes {x.shape} and {idx.shape} do not align")
        return x[np.arange(x.shape[0]), idx]

    def bwd(g, xs, out, at):
        full = np.zeros_like(xs[0])
        full[np.arange(full.shape[0]), at["index"]] = g
        return [full]

    return fwd, bwd


PRIMITIVES = tuple(sorted(_PRIMS))


class Tape:
    """Ordered record of primitive applications.

    With ``record=False`` the tape only evaluates; nothing is kept and
    ``backward`` is unavailable. Rollouts and target-network passes use that.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[DiffValue] = []

    def leaf(self, data, requires_grad=False, name=None) -> DiffValue:
        return DiffValue(data, requires_grad=requires_grad and self.record, name=name)

    def const(self, data) -> DiffValue:
        return DiffValue(data)

    def params(self, params: Mapping[str, np.ndarray], names=None, requires_grad=True) -> dict:
        """Wrap parameter arrays as leaves. Arrays are shared, never copied."""
        keys = params.keys() if names is None else names
        return {k: self.leaf(params[k], requires_grad=requires_grad, name=k) for k in keys}

    def apply(self, kind: str, *inputs: DiffValue, **attrs: Any) -> DiffValue:
        try:
            fwd, _ = _PRIMS[kind]
        except KeyError:
            raise ValueError(f"unknown primitive {kind!r}") from None
        out = fwd([x.data for x in inputs], attrs)
        needs = self.record and any(x.requires_grad for x in inputs)
        node = DiffValue(out, requires_grad=needs, kind=kind)
        if needs:
            node.inputs = inputs
            node.attrs = attrs
            self.nodes.append(node)
        return node

    def backward(self, loss: DiffValue):
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad[...] = 1.0
        for node in reversed(self.nodes):
            if node._grad is None:
                continue
            _, bwd = _PRIMS[node.kind]
            grads = bwd(node._grad, [x.data for x in node.inputs], node.data, node.attrs)
            for x, gx in zip(node.inputs, grads):
                if x.requires_grad:
                    if x._grad is None:
                        x._grad = np.array(gx, dtype=np.float64, copy=True).reshape(x.shape)
                    else:
                        x._grad += gx

    def zero_grad(self):
        for node in self.nodes:
            node.zero_grad()

    # primitive sugar
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def bmm(self, a, b):
        return self.apply("bmm", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def div(self, a, b):
        return self.apply("div", a, b)

    def scale(self, x, c):
        return self.apply("scale", x, c=float(c))

    def shift(self, x, c):
        return self.apply("shift", x, c=float(c))

    def relu(self, x):
        return self.apply("relu", x)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def tanh(self, x):
        return self.apply("tanh", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def square(self, x):
        return self.apply("square", x)

    def sqrt(self, x):
        return self.apply("sqrt", x)

    def abs(self, x):
        return self.apply("abs", x)

    def scalar_min(self, x, c):
        return self.apply("scalar_min", x, c=float(c))

    def clamp_min(self, x, c):
        return self.apply("clamp_min", x, c=float(c))

    def sum(self, x, axis=None):
        return self.apply("sum", x, axis=axis)

    def mean(self, x, axis=None):
        return self.apply("mean", x, axis=axis)

    def frobenius_norm(self, x, axis=None):
        return self.apply("frobenius_norm", x, axis=axis)

    def concat(self, xs, axis=-1):
        return self.apply("concat", *xs, axis=axis)

    def slice(self, x, index):
        return self.apply("slice", x, index=index)

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def gather(self, x, index):
        return self.apply("gather", x, index=np.asarray(index, dtype=np.intp))

    def take(self, x, index):
        return self.apply("take", x, index=np.asarray(index, dtype=np.intp))


def finite_diff_check(f, params, h=1e-5, names=None, max_coords=None, rng=None, return_detail=False):
    """Compare backward() gradients of ``f`` to central differences.

    ``f(tape, leaves)`` must build a scalar loss on ``tape`` from the leaf dict.
    ``params`` maps names to arrays; the arrays are perturbed in place and
    restored. ``max_coords`` caps the number of coordinates probed per tensor
    (chosen with ``rng``); by default every coordinate is probed.

    Returns the max over probed coordinates of ``|fd - analytic| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    names = list(params.keys() if names is None else names)
    tape = Tape()
    leaves = {k: tape.leaf(params[k], requires_grad=k in names, name=k) for k in params}
    loss = f(tape, leaves)
    tape.backward(loss)
    analytic = {k: leaves[k].grad.copy() for k in names}

    def evaluate():
        return f(Tape(record=False), {k: DiffValue(params[k]) for k in params}).item()

    worst = 0.0
    detail = []
    for k in names:
        arr = params[k]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            where = f"{k}[{tuple(int(i) for i in np.unravel_index(c, arr.shape))}]"
            try:
                flat[c] = orig + h
                fp = evaluate()
                flat[c] = orig - h
                fm = evaluate()
            except (DomainError, FloatingPointError) as exc:
                raise FloatingPointError(f"loss undefined when perturbing {where}: {exc}") from exc
            finally:
                flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss when perturbing {where}")
            fd = (fp - fm) / (2 * h)
            an = analytic[k].reshape(-1)[c]
            err = abs(fd - an) / max(1.0, abs(an))
            worst = max(worst, err)
            if return_detail:
                detail.append((k, int(c), fd, an, err))
    return (worst, detail) if return_detail else worst
