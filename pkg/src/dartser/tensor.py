"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable primitive records its inputs and a gradient rule on the
output tensor. Calling :meth:`Tensor.backward` on a scalar linearises the graph
into a :class:`Tape` (topological order) and replays the rules in reverse,
accumulating into the ``grad`` buffers of tracked leaves.
"""

from __future__ import annotations

import contextlib
import dataclasses
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_BRANCHES: list[np.ndarray] | None = None

GradRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (``"float32"`` or ``"float64"``)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    saved = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = saved


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def activation_pattern() -> Iterator[list[np.ndarray]]:
    """Collect the branch taken by every piecewise-linear primitive run inside the block.

    Two evaluations with equal patterns lie on the same linear piece of each ReLU and
    max-pool, so a finite difference between them measures a true derivative.
    """
    global _BRANCHES
    saved = _BRANCHES
    _BRANCHES = []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = saved


def note_branch(selector) -> None:
    """Called by piecewise-linear primitives; a no-op unless a pattern is being recorded."""
    if _BRANCHES is not None:
        _BRANCHES.append(np.array(selector() if callable(selector) else selector))


def make_rng(seed: int) -> np.random.Generator:
    """The single source of randomness: a PCG64 generator from a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: GradRule | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], rule: GradRule) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._rule = rule if track else None
        return out

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._rule is None

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"gradient shape {value.shape} does not match tensor shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on a tensor that is not tracked")
        Tape.record(self).replay(np.ones_like(self.data))

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Topologically ordered record of the primitives that produced a tensor."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        """Run every gradient rule once in reverse order, then release the graph."""
        root = self.entries[-1]
        pending: dict[int, np.ndarray] = {id(root): seed}
        while self.entries:
            node = self.entries.pop()
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            grads = node._rule(g)
            parents = node._parents
            # the graph is single-use: dropping rules frees the saved activations early
            node._rule = None
            node._parents = ()
            node.requires_grad = False
            for parent, pg in zip(parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.size == 1 and b.ndim <= a.ndim:
        return
    if a.size == 1 and a.ndim <= b.ndim:
        return
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_pair(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_pair(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(ad / bd, (a, b), rule)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b) -> Tensor:
    """Apply ``add``, ``sub``, ``mul`` or ``div``; only scalars broadcast."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return op(a, b)


# -- elementwise unary -----------------------------------------------------
def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    note_branch(lambda: a.data > 0)
    return Tensor._result(out, (a,), lambda g: (g * (out > 0),))


# -- reductions and shape ops ---------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(out, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    out = np.array(a.data[index], dtype=dtype)

    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in (index if isinstance(index, tuple) else (index,)))

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack of an empty sequence")
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch extents of ``a`` broadcast over a 2-D ``b``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)

    return Tensor._result(ad @ bd, (a, b), rule)


# -- normalisation and losses ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError(f"softmax over an empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError(f"log_softmax over an empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    prob = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - prob * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects logits [B, K] and labels [B], got {logits.shape}, {labels.shape}")
    b, k = logits.shape
    if b == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return Tensor._result(loss, (logits,), rule)


# -- verification ----------------------------------------------------------
def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check_tensors(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop against central differences for every probed coordinate.

    ``f`` is re-evaluated with each coordinate of each tensor nudged by ``+/-eps``;
    with ``max_coords`` only a random subset of coordinates per tensor is probed.
    Returns the maximum relative error.
    """
    if not eps > 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.astype(np.float64).ravel()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or make_rng(0)).choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        with no_grad():
            for n, i in enumerate(coords):
                saved = flat[i]
                flat[i] = saved + eps
                up = float(f().data)
                flat[i] = saved - eps
                down = float(f().data)
                flat[i] = saved
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError(f"non-finite function value at probe coordinate {i}")
                numeric[n] = (up - down) / (2.0 * eps)
        worst = max(worst, _relative_error(analytic[coords], numeric))
    return worst


@dataclasses.dataclass(frozen=True)
class PiecewiseCheck:
    max_error: float
    probed: int
    excluded: int


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_piecewise(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-3,
    coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> PiecewiseCheck:
    """Central-difference check for functions built from ReLU and max-pool.

    A probe whose ``+eps`` or ``-eps`` evaluation changes the activation pattern straddles a
    kink, where the difference quotient is not a derivative estimate; such probes are
    counted in ``excluded`` and replaced by the next coordinate of the tensor.
    """
    if not eps > 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    rng = rng or make_rng(0)
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    with activation_pattern() as base:
        loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    worst, probed, excluded = 0.0, 0, 0
    for t in tensors:
        analytic = t.grad.astype(np.float64).ravel()
        flat = t.data.reshape(-1)
        want = flat.size if coords_per_tensor is None else min(coords_per_tensor, flat.size)
        taken = 0
        for i in rng.permutation(flat.size):
            if taken == want:
                break
            saved = flat[i]
            values = []
            crossed = False
            with no_grad():
                for step in (eps, -eps):
                    flat[i] = saved + step
                    with activation_pattern() as pattern:
                        values.append(float(f().data))
                    crossed = crossed or not _same_pattern(base, pattern)
            flat[i] = saved
            if not all(np.isfinite(values)):
                raise FloatingPointError(f"non-finite function value at probe coordinate {i}")
            if crossed:
                excluded += 1
                continue
            numeric = (values[0] - values[1]) / (2.0 * eps)
            worst = max(worst, _relative_error(analytic[i:i + 1], np.array([numeric])))
            taken += 1
            probed += 1
    return PiecewiseCheck(worst, probed, excluded)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between the analytic and central-difference gradient of ``f`` at ``x``.

    Runs at 64-bit precision regardless of the input's dtype.
    """
    if not eps > 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    with precision(np.float64):
        probe = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
        return grad_check_tensors(lambda: f(probe), [probe], eps)
