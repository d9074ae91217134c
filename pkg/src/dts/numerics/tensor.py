"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations record themselves only while a :class:`Tape` is active and at least
one input requires a gradient, so inference runs without any bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
EPS = 1e-12


class ShapeMismatch(ValueError):
    pass


class AllMasked(ValueError):
    pass


class NotNormalized(ValueError):
    pass


class UnrecordedTensor(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape: no gradient flows back through it."""
    return Tensor(as_tensor(x).data)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations in execution order while active (``with Tape() as tape``)."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    return Tape._active[-1] if Tape._active else None


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    node = _Node(out, tuple(inputs), backward)
    out._node = (tape, len(tape.nodes))
    tape.nodes.append(node)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reached."""
    if loss._node is None or loss._node[0] is not tape:
        raise UnrecordedTensor("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}
    # leaf weight gradients of the form x^T g, summed later in one product
    products: dict[int, tuple[list, list]] = {}
    for node in reversed(tape.nodes[: loss._node[1] + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        owned.discard(id(node.out))
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t._node is None:
                leaves[key] = t
            if isinstance(gi, _Outer):
                xs, gs = products.setdefault(key, ([], []))
                xs.append(gi.x)
                gs.append(gi.g)
            elif key not in grads:
                grads[key] = gi
            elif key in owned:
                grads[key] += gi
            else:
                grads[key] = grads[key] + gi
                owned.add(key)
    for key, (xs, gs) in products.items():
        total = np.concatenate(xs, axis=0).T @ np.concatenate(gs, axis=0)
        grads[key] = total + grads[key] if key in grads else total
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class _Outer:
    """Deferred ``x.T @ g`` contribution to a leaf's gradient."""

    __slots__ = ("x", "g")

    def __init__(self, x: np.ndarray, g: np.ndarray):
        self.x = x
        self.g = g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    """Natural log with inputs floored at 1e-12."""
    x = as_tensor(x)
    floored = np.maximum(x.data, EPS)
    return _record(
        np.log(floored), (x,), lambda g: (np.where(x.data > EPS, g / floored, 0.0),)
    )


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for 1-D/2-D ``a`` and 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ b.data.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        x2, g2 = (a.data[None, :], g[None, :]) if a.ndim == 1 else (a.data, g)
        gb = _Outer(x2, g2) if b._node is None else x2.T @ g2
        return ga, gb

    return _record(a.data @ b.data, (a, b), grad)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; every index of an operand must occur in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(ch not in other and ch not in out for ch in own):
            raise ValueError(f"einsum: unsupported contraction {spec!r}")
    try:
        data = np.einsum(spec, a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"einsum {spec}: {e}") from None
    return _record(
        data,
        (a, b),
        lambda g: (
            np.einsum(f"{out},{sb}->{sa}", g, b.data),
            np.einsum(f"{out},{sa}->{sb}", g, a.data),
        ),
    )


# -- shape ops ---------------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(data, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"stack: {e}") from None
    return _record(
        data,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


def index(x, idx) -> Tensor:
    """``x[idx]`` for basic or integer-array indices."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def grad(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), grad)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def pick_rows(sources: Sequence[Tensor], choice: Sequence[int]) -> Tensor:
    """Row ``b`` of the output is row ``b`` of ``sources[choice[b]]``."""
    ts = [as_tensor(t) for t in sources]
    choice = np.asarray(choice, dtype=np.int64)
    rows = np.arange(len(choice))
    data = np.empty((len(choice),) + ts[0].shape[1:], dtype=DTYPE)
    groups = {int(c): rows[choice == c] for c in np.unique(choice)}
    for c, r in groups.items():
        data[r] = ts[c].data[r]

    def grad(g):
        out = [None] * len(ts)
        for c, r in groups.items():
            gc = np.zeros_like(ts[c].data)
            gc[r] = g[r]
            out[c] = gc
        return tuple(out)

    return _record(data, ts, grad)


# -- reductions and normalizers --------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(data, (x,), grad)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is false get exactly 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise AllMasked("softmax: a row has every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), grad)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def grad(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.data[ids], (table,), grad)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout realised as a recorded multiplication by a sampled mask."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def kl_rows(p, q) -> Tensor:
    """Row-wise KL(p || q) over the last axis; ``0 ln 0 = 0`` and q floored at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"kl: {p.shape} vs {q.shape}")
    pos = p.data > 0
    qf = np.maximum(q.data, EPS)
    logp = np.log(np.where(pos, p.data, 1.0))
    terms = np.where(pos, p.data * (logp - np.log(qf)), 0.0)

    def grad(g):
        g = np.expand_dims(g, -1)
        gp = np.where(pos, logp - np.log(qf) + 1.0, 0.0) * g
        gq = np.where(q.data > EPS, -p.data / qf, 0.0) * g
        return gp, gq

    return _record(terms.sum(axis=-1), (p, q), grad)


def kl_divergence(p, q, atol: float = 1e-6) -> Tensor:
    """KL(p || q) between probability vectors, validated for normalisation."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"kl: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or np.any(np.abs(t.data.sum(axis=-1) - 1.0) > atol):
            raise NotNormalized(f"{name} is not a probability distribution")
    return kl_rows(p, q)
