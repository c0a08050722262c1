"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape records primitive operations during a forward pass; calling
``backward`` on a scalar loss replays the tape in reverse and accumulates
gradients into every :class:`Parameter` that contributed to it. Gradients
keep accumulating across backward calls until ``zero_grad`` resets them.

Everything is float64. Tensors built outside an active tape are plain
constants: the same primitives work but nothing is recorded.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "grad_check",
    "ShapeError",
    "EvaluationError",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "slice_axis",
    "reshape",
    "clip",
    "sigmoid",
    "tanh",
    "relu",
    "silu",
    "exp",
    "log",
    "softmax",
    "logsumexp",
    "reduce_sum",
    "reduce_mean",
    "bspline_basis",
    "custom_op",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class EvaluationError(RuntimeError):
    """Raised when a checked evaluation produces a non-finite value."""


class Tensor:
    """A float64 array value, possibly tracked on the active tape."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient buffer."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive calls for one forward pass.

    Used as a context manager; backward walks the record in reverse
    creation order, which is a valid reverse topological order for a
    define-by-run graph.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor, seed: float = 1.0):
        """Accumulate d(loss)/d(param) into every Parameter on this tape."""
        if loss.size != 1:
            raise EvaluationError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {
            id(loss): np.full_like(loss.data, seed)
        }
        for out, inputs, vjp in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gin in zip(inputs, vjp(g)):
                if gin is None:
                    continue
                if isinstance(inp, Parameter):
                    inp.grad += gin
                else:
                    key = id(inp)
                    acc = grads.get(key)
                    if acc is None:
                        grads[key] = np.array(gin, dtype=np.float64)
                    else:
                        acc += gin
        # a bare Parameter used directly as the loss
        if isinstance(loss, Parameter):
            loss.grad += np.full_like(loss.data, seed)


def backward(loss: Tensor, tape: Tape | None = None):
    """Module-level convenience for ``tape.backward(loss)``."""
    if tape is None:
        if not _TAPE_STACK:
            raise EvaluationError("backward called with no active tape")
        tape = _TAPE_STACK[-1]
    tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never receives a gradient."""
    return Tensor(x)


def _record(out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data)
    if _TAPE_STACK:
        _TAPE_STACK[-1].ops.append((out, inputs, vjp))
    return out


def custom_op(out_data, inputs, vjp) -> Tensor:
    """Register a composite operation with an exact vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input, each matching
    that input's shape. Modules use this to fuse long recursions into a
    single tape node without losing differentiability.
    """
    return _record(out_data, tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def _elementwise_pair(name, a, b, fwd, dfa, dfb):
    ad, bd = a.data, b.data
    try:
        out = fwd(ad, bd)
    except ValueError as e:
        raise ShapeError(f"{name}: incompatible shapes {ad.shape}, {bd.shape}") from e

    def vjp(g):
        return (
            _unbroadcast(dfa(g, ad, bd), ad.shape),
            _unbroadcast(dfb(g, ad, bd), bd.shape),
        )

    return _record(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise_pair(
        "add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise_pair(
        "sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise_pair(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _record(out, (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[d.shape for d in datas]}") from e
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]
    shape = a.data.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=np.float64)
        ga[idx] = g
        return (ga,)

    return _record(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _record(out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero outside [lo, hi]."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = (ad >= lo) & (ad <= hi)

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _record(s, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return _record(t, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0)

    def vjp(g):
        return (g * (ad > 0.0),)

    return _record(out, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = expit(ad)
    out = ad * s

    def vjp(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _record(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = np.log(ad)

    def vjp(g):
        return (g / ad,)

    return _record(out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    ad = a.data
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (a,), vjp)


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-shifted for stability."""
    ad = a.data
    m = ad.max(axis=-1, keepdims=True)
    out = np.log(np.exp(ad - m).sum(axis=-1, keepdims=True)) + m
    out = out[..., 0]
    soft = np.exp(ad - out[..., None])

    def vjp(g):
        return (soft * g[..., None],)

    return _record(out, (a,), vjp)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    out = ad.sum(axis=axis)
    shape = ad.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=np.float64),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    out = ad.mean(axis=axis)
    shape = ad.shape
    n = ad.size if axis is None else ad.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n, dtype=np.float64),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# B-spline basis


def make_knots(grid_size: int, degree: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Uniform knot vector over [lo, hi] extended by `degree` on each side."""
    h = (hi - lo) / grid_size
    return lo + h * np.arange(-degree, grid_size + degree + 1, dtype=np.float64)


def _bspline_values(x: np.ndarray, knots: np.ndarray, degree: int):
    """Cox-de Boor basis values and derivatives at each x.

    Returns (basis, dbasis) of shape x.shape + (grid + degree,).
    """
    x = x[..., None]
    b = ((x >= knots[:-1]) & (x < knots[1:])).astype(np.float64)
    prev = b
    for k in range(1, degree + 1):
        left = (x - knots[: -k - 1]) / (knots[k:-1] - knots[: -k - 1])
        right = (knots[k + 1:] - x) / (knots[k + 1:] - knots[1:-k])
        newb = left * b[..., :-1] + right * b[..., 1:]
        if k == degree:
            prev = b
        b = newb
    # derivative from the degree-(k-1) basis
    k = degree
    d_left = k / (knots[k:-1] - knots[: -k - 1])
    d_right = k / (knots[k + 1:] - knots[1:-k])
    db = d_left * prev[..., :-1] - d_right * prev[..., 1:]
    return b, db


def bspline_basis(x: Tensor, knots: np.ndarray, degree: int) -> Tensor:
    """Degree-`degree` B-spline basis expansion along a trailing new axis.

    Inputs are clamped into the interior knot span before evaluation; the
    gradient is zero where clamping was active.
    """
    lo = knots[degree]
    hi = knots[-degree - 1]
    eps = 1e-9 * (hi - lo)
    xd = x.data
    xc = np.clip(xd, lo, hi - eps)
    mask = (xd >= lo) & (xd <= hi - eps)
    basis, dbasis = _bspline_values(xc, knots, degree)

    def vjp(g):
        return ((g * dbasis).sum(axis=-1) * mask,)

    return _record(basis, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from ``params``. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise EvaluationError("grad_check: non-finite function value")
        return v

    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad[...] = s

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint files
#
# Layout (little-endian):
#   magic   4 bytes  b"RGKT"
#   version u32      currently 1
#   count   u32      number of tensors
#   per tensor:
#     name_len u16, name utf-8 bytes,
#     ndim u8, dims u32 * ndim,
#     data float64 * prod(dims), C order

_MAGIC = b"RGKT"
_VERSION = 1


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors to a versioned binary file."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named)))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = data.astype(np.float64)
        return out
