"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op checks shapes strictly; there is no implicit broadcasting.  Ops
record themselves on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  ``Tape.backward`` walks the record in
reverse and returns gradients for the requested leaves.

Shape rules (``n``, ``m``, ``k``, ``d`` are sizes, ``E`` an index count):

============================  ==========================================
op                            rule
============================  ==========================================
matmul(a, b)                  (n, k) @ (k, m) -> (n, m)
add / sub / mul(a, b)         identical shapes -> same shape
add_bias(x, b)                (n, d) + (d,) -> (n, d)
scale(x, c)                   any shape, python float c
mul_rows / div_rows(x, s)     (n, d) with (n,) -> (n, d)
relu / sigmoid / exp          elementwise
concat(xs, axis)              shapes equal except along ``axis``
transpose(x)                  (n, m) -> (m, n)
reshape(x, shape)             same element count
sum / mean(x, axis)           reduction; ``axis=None`` gives a scalar
gather(x, idx)                (n, ...) rows picked by (E,) -> (E, ...)
segment_sum(x, seg, n)        (E, ...) summed into (n, ...) by seg ids
segment_softmax(s, seg, n)    (E,) normalised within each segment
row_dot(a, b)                 (n, d), (n, d) -> (n,)
normalize_rows(x)             (n, d) rows scaled to unit norm; 0 rows stay 0
cosine_similarity(a, b)       (n, d), (m, d) -> (n, m); (d,), (d,) -> ()
softmax_cross_entropy(z, y)   (n, m) logits, (n,) int targets -> () mean
============================  ==========================================
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["Tape"] = []

_NORM_EPS = 1e-12
_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Raised when op inputs do not satisfy the op's shape rule."""


class Tensor:
    """A dense float64 array plus an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar for the handful of cases that read better infix
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops, used as a context manager.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, Tensor([3.0, 4.0])))
    >>> tape.backward(loss, [w])[0]
    array([3., 4.])
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._active = False

    def __enter__(self) -> "Tape":
        self._active = True
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._active = False
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Leaves that the loss does not depend on get a zero gradient.  The tape
        is cleared afterwards.
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for t, g in zip(rec.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g.reshape(t.shape))
        self.clear()
        return out


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, wrt: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward called without an active tape")
    return tape.backward(loss, wrt)


def scatter_add(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[idx[i]] += values[i]; bincount is far faster than ufunc.at."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(np.float64)
    if len(idx) == 0:
        return np.zeros((n,) + values.shape[1:])
    flat = values.reshape(len(idx), -1)
    d = flat.shape[1]
    # one bincount over (row, column) cells
    cells = (np.asarray(idx)[:, None] * d + np.arange(d)).ravel()
    out = np.bincount(cells, weights=flat.ravel(), minlength=n * d)
    return out.reshape((n,) + values.shape[1:])


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(op, inputs, res, bwd))
    return res


def _mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------- linear ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def bwd(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("add", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("sub", a.shape, b.shape)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise _mismatch("add_bias", x.shape, b.shape)
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar_scale", (x,), x.data * c, lambda g: (g * c,))


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise _mismatch("mul_rows", x.shape, s.shape)
    X, S = x.data, s.data
    return _emit("mul_rows", (x, s), X * S[:, None],
                 lambda g: (g * S[:, None], (g * X).sum(axis=1)))


def div_rows(x: Tensor, s: Tensor) -> Tensor:
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise _mismatch("div_rows", x.shape, s.shape)
    X, S = x.data, s.data
    out = X / S[:, None]

    def bwd(g):
        return g / S[:, None], -(g * out).sum(axis=1) / S

    return _emit("div_rows", (x, s), out, bwd)


# ------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN so the trainer's finiteness check still sees it
    return _emit("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # float64 rounds to exactly 0 or 1 in the far tails; keep the open interval
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


# ----------------------------------------------------------------- structure

def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise _mismatch("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", xs, np.concatenate([t.data for t in xs], axis=axis), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _emit("transpose", (x,), x.data.T, lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise _mismatch("reshape", x.shape, shape)
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    old = x.shape

    def bwd(g):
        if axis is None:
            return (np.full(old, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), old).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis)), bwd)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {x.shape}")
    return scale(sum_(x, axis), 1.0 / count)


def gather(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for {x.shape[0]} rows")
    old = x.shape

    def bwd(g):
        return (scatter_add(idx, g, old[0]),)

    return _emit("gather", (x,), x.data[idx], bwd)


def segment_sum(x: Tensor, seg, num_segments: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape != (x.shape[0],):
        raise _mismatch("segment_sum", x.shape, seg.shape)
    out = scatter_add(seg, x.data, num_segments)
    return _emit("segment_sum", (x,), out, lambda g: (g[seg],))


def segment_softmax(s: Tensor, seg, num_segments: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.intp)
    if s.data.ndim != 1 or seg.shape != s.shape:
        raise _mismatch("segment_softmax", s.shape, seg.shape)
    top = np.full(num_segments, -np.inf)
    np.maximum.at(top, seg, s.data)
    e = np.exp(s.data - top[seg])
    den = scatter_add(seg, e, num_segments)
    p = e / den[seg]

    def bwd(g):
        dot = scatter_add(seg, g * p, num_segments)
        return (p * (g - dot[seg]),)

    return _emit("segment_softmax", (s,), p, bwd)


# ---------------------------------------------------------------- similarity

def row_dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape != b.shape:
        raise _mismatch("row_dot", a.shape, b.shape)
    A, B = a.data, b.data
    return _emit("row_dot", (a, b), (A * B).sum(axis=1),
                 lambda g: (g[:, None] * B, g[:, None] * A))


def normalize_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows: expected a matrix, got shape {x.shape}")
    X = x.data
    norm = np.sqrt((X * X).sum(axis=1))
    live = ~(norm <= _NORM_EPS)        # NaN rows stay live and propagate
    safe = np.where(live, norm, 1.0)
    out = np.where(live[:, None], X / safe[:, None], 0.0)

    def bwd(g):
        proj = (g * out).sum(axis=1)
        gx = (g - out * proj[:, None]) / safe[:, None]
        return (np.where(live[:, None], gx, 0.0),)

    return _emit("normalize_rows", (x,), out, bwd)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine between matching rows of ``a`` and ``b``."""
    return row_dot(normalize_rows(a), normalize_rows(b))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine matrix; zero vectors have similarity 0 to everything."""
    if a.data.ndim == 1 and b.data.ndim == 1:
        if a.shape != b.shape:
            raise _mismatch("cosine_similarity", a.shape, b.shape)
        m = cosine_similarity(reshape(a, (1, a.size)), reshape(b, (1, b.size)))
        return reshape(m, ())
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise _mismatch("cosine_similarity", a.shape, b.shape)
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax on plain arrays (no tape)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of row-softmaxed ``logits`` against integer targets."""
    Z = logits.data
    if Z.ndim == 1:
        return softmax_cross_entropy(reshape(logits, (1, Z.size)), np.atleast_1d(target))
    y = np.asarray(target, dtype=np.intp)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise _mismatch("softmax_cross_entropy", Z.shape, y.shape)
    if Z.shape[0] == 0:
        raise ShapeError("softmax_cross_entropy: no rows")
    if y.min() < 0 or y.max() >= Z.shape[1]:
        raise ShapeError(f"softmax_cross_entropy: target out of range for {Z.shape[1]} classes")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(Z.shape[0])
    loss = float(np.mean(logsum - shifted[rows, y]))
    p = np.exp(shifted - logsum[:, None])

    def bwd(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (d * (float(g) / Z.shape[0]),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), bwd)


_OPS = {
    "matmul": matmul, "add": add, "concat": concat, "relu": relu, "sigmoid": sigmoid,
    "mean": mean, "softmax_cross_entropy": softmax_cross_entropy,
    "cosine_similarity": cosine_similarity, "scalar_scale": scale,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the core named ops."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)
