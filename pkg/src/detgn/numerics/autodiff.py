"""Reverse-mode differentiation over numpy arrays.

Every primitive accepts either plain ``numpy`` arrays or :class:`Var` handles.
When no argument is a ``Var`` the primitive simply returns the computed array,
so the same model code runs untaped for inference and taped for training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, id_: int, value: np.ndarray):
        self.tape = tape
        self.id = id_
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Single-writer record of primitive operations in execution order."""

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], Backward]] = []
        self._count = 0

    def __len__(self) -> int:
        return len(self._ops)

    def leaf(self, value) -> Var:
        v = Var(self, self._count, np.asarray(value, dtype=np.float64))
        self._count += 1
        return v

    def _record(self, value: np.ndarray, inputs, backward: Backward) -> Var:
        ids = []
        for a in inputs:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ValueError("operands recorded on different tapes")
                ids.append(a.id)
            else:
                ids.append(None)
        out = Var(self, self._count, value)
        self._count += 1
        self._ops.append((out.id, tuple(ids), backward))
        return out


def grad(tape: Tape, output: Var, params: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of the scalar ``output`` with respect to each of ``params``.

    Parameters the output does not depend on receive a zero gradient.
    """
    if output.value.size != 1:
        raise ValueError(f"output must be scalar, got shape {output.shape}")
    adj: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for out_id, in_ids, backward in reversed(tape._ops):
        g = adj.pop(out_id, None)
        if g is None:
            continue
        grads = backward(g)
        for i, gi in zip(in_ids, grads):
            if i is None or gi is None:
                continue
            if i in adj:
                adj[i] = adj[i] + gi
            else:
                adj[i] = gi
    return [adj.get(p.id, np.zeros_like(p.value)) for p in params]


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _emit(out: np.ndarray, inputs, backward: Backward):
    for a in inputs:
        if isinstance(a, Var):
            return a.tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    return _emit(
        av + bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = value(a), value(b)
    return _emit(
        av - bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b):
    av, bv = value(a), value(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(a):
    return _emit(-value(a), (a,), lambda g: (-g,))


def square(a):
    av = value(a)
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _emit(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(value(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def relu(a):
    av = value(a)
    mask = av > 0
    return _emit(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2):
    av = value(a)
    factor = np.where(av > 0, 1.0, slope)
    return _emit(av * factor, (a,), lambda g: (g * factor,))


# reductions and shape ------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    av = value(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _emit(np.transpose(value(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    av = value(a)

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(av[idx]), (a,), back)


def concat(items, axis: int = 0):
    vals = [value(x) for x in items]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(vals))
        )

    return _emit(np.concatenate(vals, axis=axis), tuple(items), back)


# linear algebra ------------------------------------------------------------


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), back)


def einsum(spec: str, a, b):
    """Two-operand einsum; every input index must survive in the output or the other operand."""
    lhs, out_s = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if not set(s) <= set(out_s) | set(other):
            raise ValueError(f"einsum index summed out of a single operand in {spec!r}")
    av, bv = value(a), value(b)

    def back(g):
        return (
            np.einsum(f"{out_s},{sb}->{sa}", g, bv, optimize=True),
            np.einsum(f"{out_s},{sa}->{sb}", g, av, optimize=True),
        )

    return _emit(np.einsum(spec, av, bv, optimize=True), (a, b), back)


# fused network primitives --------------------------------------------------


def softmax(a, axis: int = -1):
    av = value(a)
    z = np.exp(av - av.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _emit(
        y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    )


def normalize(a, axis: int = -1, eps: float = 1e-10):
    """Zero-mean, unit-variance rescaling along ``axis`` (layer norm without affine)."""
    av = value(a)
    mu = av.mean(axis=axis, keepdims=True)
    xc = av - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = np.mean(g * xhat, axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _emit(xhat, (a,), back)


def causal_conv1d(x, w, b=None, dilation: int = 1):
    """Dilated causal convolution over the last axis.

    ``x`` is (batch, in, steps), ``w`` is (out, in, width) and tap ``i`` reads
    step ``t - dilation*i`` with zeros before the first step.
    """
    xv, wv = value(x), value(w)
    batch, cin, n = xv.shape
    cout, win, width = wv.shape
    if win != cin:
        raise ValueError(f"kernel expects {win} input channels, got {cin}")
    # im2col with the batch folded into the step axis: one GEMM each way
    shifts = [dilation * i for i in range(width)]
    xt = np.transpose(xv, (1, 0, 2))  # (in, batch, steps)
    cols = np.zeros((width, cin, batch, n))
    for i, s in enumerate(shifts):
        if s < n:
            cols[i, :, :, s:] = xt[:, :, : n - s]
    cols = cols.reshape(width * cin, batch * n)
    wmat = np.transpose(wv, (0, 2, 1)).reshape(cout, width * cin)
    out = (wmat @ cols).reshape(cout, batch, n).transpose(1, 0, 2)
    if b is not None:
        out = out + value(b)[:, None]

    def back(g):
        g2 = np.transpose(g, (1, 0, 2)).reshape(cout, batch * n)
        gw = (g2 @ cols.T).reshape(cout, width, cin).transpose(0, 2, 1)
        gcols = (wmat.T @ g2).reshape(width, cin, batch, n)
        gxt = np.zeros((cin, batch, n))
        for i, s in enumerate(shifts):
            if s < n:
                gxt[:, :, : n - s] += gcols[i, :, :, s:]
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return np.transpose(gxt, (1, 0, 2)), gw, gb

    return _emit(out, (x, w, b), back)
