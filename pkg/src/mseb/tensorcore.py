"""Minimal dense-tensor numerics with reverse-mode autodiff on an explicit tape.

Every trainable operation in the package is built from the ops defined here.
Conventions that matter for portability of saved weights:

* ``conv1d`` uses the cross-correlation convention (no kernel flip); the
  checkpoint header records this.
* Elementwise ops broadcast against scalars only; any other shape mismatch is
  a :class:`DimensionError`.
* Forward results are checked for NaN/Inf and raise :class:`NumericsError`
  instead of propagating silently.

A :class:`Tape` records executed ops in execution order. ``backward`` walks
the record in reverse exactly once, accumulates gradients into the ``grad``
attribute of leaf tensors with ``requires_grad=True``, then clears the tape;
calling ``backward`` again without a fresh forward pass raises
:class:`TapeError`. Tapes are single-threaded; tensors themselves are
value-semantic and never mutated by ops.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, DimensionError, NumericsError, TapeError

EPS_NORM = 1e-12

_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_default_dtype(dtype):
    """Set the dtype used for tensors created from non-float data (32/64-bit)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


class Tensor:
    """A dense real array plus autodiff metadata. Data is treated as immutable."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed differentiable ops for one forward pass."""

    __slots__ = ("_records", "_produced")

    def __init__(self):
        self._records = []
        self._produced = set()

    def __len__(self):
        return len(self._records)

    def record(self, out, parents):
        self._records.append((out, parents))
        self._produced.add(id(out))

    def clear(self):
        self._records.clear()
        self._produced.clear()


_active_tape = Tape()
_grad_enabled = True


def active_tape():
    return _active_tape


def reset_tape():
    """Drop any recorded graph (used between independent training steps)."""
    _active_tape.clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / target extraction)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} produced non-finite values")


def _make(name, out_data, parents):
    """Wrap an op result, check finiteness, and record it when grads are live.

    ``parents`` is a list of (tensor, vjp) pairs; each vjp maps the output
    gradient to that parent's gradient contribution.
    """
    _check_finite(name, out_data)
    live = [(p, vjp) for p, vjp in parents if p.requires_grad]
    rg = _grad_enabled and bool(live)
    out = Tensor(out_data, requires_grad=rg)
    if rg:
        _active_tape.record(out, live)
    return out


def backward(loss):
    """Accumulate gradients of a scalar loss into all requires_grad leaves.

    The tape is cleared afterwards; a second backward without a new forward
    pass raises :class:`TapeError`.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor loss")
    if loss.data.shape != ():
        raise DimensionError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = _active_tape
    if id(loss) not in tape._produced:
        raise TapeError("loss was not produced on the active tape (backward twice, or no forward)")
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    try:
        for out, parents in reversed(tape._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, vjp in parents:
                pg = vjp(g)
                if id(parent) in tape._produced:
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    finally:
        tape.clear()


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_scalar(x):
    """Accept python scalars and 0-d arrays for the scalar-broadcast path."""
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def _binary_elementwise(name, a, b, fwd, vjp_a, vjp_b):
    if not isinstance(a, Tensor):
        raise DimensionError(f"{name}: first argument must be a Tensor")
    s = _as_scalar(b)
    if s is not None:
        out = fwd(a.data, a.data.dtype.type(s))
        return _make(name, out, [(a, lambda g: vjp_a(g, a.data, s))])
    if not isinstance(b, Tensor):
        raise DimensionError(f"{name}: second argument must be a Tensor or scalar")
    if b.data.shape == () and a.data.shape != ():
        out = fwd(a.data, b.data)
        return _make(name, out, [
            (a, lambda g: vjp_a(g, a.data, b.data)),
            (b, lambda g: vjp_b(g, a.data, b.data).sum(dtype=b.data.dtype)),
        ])
    if a.data.shape == () and b.data.shape != ():
        out = fwd(a.data, b.data)
        return _make(name, out, [
            (a, lambda g: vjp_a(g, a.data, b.data).sum(dtype=a.data.dtype)),
            (b, lambda g: vjp_b(g, a.data, b.data)),
        ])
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} differ (only scalar broadcast is supported)"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = fwd(a.data, b.data)
    return _make(name, out, [
        (a, lambda g: vjp_a(g, a.data, b.data)),
        (b, lambda g: vjp_b(g, a.data, b.data)),
    ])


def add(a, b):
    return _binary_elementwise(
        "add", a, b,
        lambda x, y: x + y,
        lambda g, x, y: g,
        lambda g, x, y: g,
    )


def sub(a, b):
    return _binary_elementwise(
        "sub", a, b,
        lambda x, y: x - y,
        lambda g, x, y: g,
        lambda g, x, y: -g,
    )


def mul(a, b):
    return _binary_elementwise(
        "mul", a, b,
        lambda x, y: x * y,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x,
    )


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D tensors, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _make("matmul", out, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def conv1d(x, kernels, stride=1, padding="same", dilation=1):
    """1-D convolution over time (cross-correlation, no kernel flip).

    x: [T, Cin]; kernels: [W, Cin, Cout] with W odd. Tap offsets are spaced
    ``dilation`` frames apart (kernel extent (W-1)*dilation + 1).
    ``padding="same"`` keeps T unchanged and requires stride 1;
    ``padding="none"`` yields T' = (T - extent) // stride + 1.
    """
    if x.data.ndim != 2 or kernels.data.ndim != 3:
        raise DimensionError(f"conv1d expects x [T,Cin] and kernels [W,Cin,Cout], got {x.data.shape}, {kernels.data.shape}")
    w, cin, _ = kernels.data.shape
    if w % 2 != 1:
        raise DimensionError(f"conv1d kernel width must be odd, got {w}")
    if x.data.shape[1] != cin:
        raise DimensionError(f"conv1d channel mismatch: input {x.data.shape[1]}, kernel {cin}")
    if stride < 1:
        raise DimensionError(f"conv1d stride must be >= 1, got {stride}")
    if dilation < 1:
        raise DimensionError(f"conv1d dilation must be >= 1, got {dilation}")
    if padding not in ("same", "none"):
        raise ValueError(f"conv1d padding must be 'same' or 'none', got {padding!r}")
    extent = (w - 1) * dilation + 1
    if padding == "same":
        if stride != 1:
            raise DimensionError("conv1d same-padding is defined for stride 1 only")
        pad = (extent - 1) // 2
        xp = np.pad(x.data, ((pad, pad), (0, 0)))
    else:
        pad = 0
        if extent > x.data.shape[0]:
            raise DimensionError(f"conv1d kernel extent {extent} exceeds input length {x.data.shape[0]} with padding 'none'")
        xp = x.data
    xp = np.ascontiguousarray(xp)
    kd = np.ascontiguousarray(kernels.data)
    out = _kernels.conv1d_fwd(xp, kd, stride, dilation)
    t_padded = xp.shape[0]

    def vjp_x(g):
        g = np.ascontiguousarray(g)
        gxp = _kernels.conv1d_bwd_x(g, kd, stride, dilation, t_padded)
        return gxp[pad : t_padded - pad] if pad else gxp

    def vjp_k(g):
        g = np.ascontiguousarray(g)
        return _kernels.conv1d_bwd_k(xp, g, stride, dilation, w)

    return _make("conv1d", out, [(x, vjp_x), (kernels, vjp_k)])


def add_bias(x, b):
    """Add a per-channel bias vector b[C] to every row of x[T, C]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias expects x [T,C] and b [C], got {x.data.shape}, {b.data.shape}")
    out = x.data + b.data
    return _make("add_bias", out, [
        (x, lambda g: g),
        (b, lambda g: g.sum(axis=0)),
    ])


def relu(x):
    xd = x.data
    out = np.maximum(xd, 0)
    return _make("relu", out, [(x, lambda g: g * (xd > 0))])


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, [(x, lambda g: g * out)])


def log(x):
    if np.any(x.data <= 0):
        raise NumericsError("log of non-positive value")
    xd = x.data
    out = np.log(xd)
    return _make("log", out, [(x, lambda g: g / xd)])


def mean_axis(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"mean_axis: axis {axis} out of range for shape {x.data.shape}")
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        return np.repeat(np.expand_dims(g / n, axis), n, axis=axis)

    return _make("mean_axis", out, [(x, vjp)])


def sum_all(x):
    shape = x.data.shape
    dt = x.data.dtype
    out = x.data.sum()
    return _make("sum_all", out, [(x, lambda g: np.full(shape, g, dtype=dt))])


def reshape(x, shape):
    old = x.data.shape
    out = x.data.reshape(shape)
    return _make("reshape", out, [(x, lambda g: g.reshape(old))])


def pick(x, index):
    """Select one entry of a 1-D tensor (used to read the true-class logit)."""
    if x.data.ndim != 1:
        raise DimensionError(f"pick expects a 1-D tensor, got shape {x.data.shape}")
    if not 0 <= index < x.data.shape[0]:
        raise DimensionError(f"pick index {index} out of range for length {x.data.shape[0]}")
    n = x.data.shape[0]
    dt = x.data.dtype
    out = x.data[index]

    def vjp(g):
        gx = np.zeros(n, dtype=dt)
        gx[index] = g
        return gx

    return _make("pick", out, [(x, vjp)])


def take_row(x, index):
    """Select row ``index`` of a 2-D tensor as a 1-D tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"take_row expects a 2-D tensor, got shape {x.data.shape}")
    if not 0 <= index < x.data.shape[0]:
        raise DimensionError(f"take_row index {index} out of range")
    shape = x.data.shape
    dt = x.data.dtype
    out = x.data[index]

    def vjp(g):
        gx = np.zeros(shape, dtype=dt)
        gx[index] = g
        return gx

    return _make("take_row", out, [(x, vjp)])


def sliding_mean(x, window, stride=1):
    """Truncated sliding mean along axis 0; window must be odd.

    Output row i averages input rows in [i*stride - r, i*stride + r]
    intersected with the valid range (r = (window-1)//2). With stride 1 the
    number of rows is preserved; window 1 is the identity.
    """
    if window % 2 != 1 or window < 1:
        raise DimensionError(f"sliding_mean window must be odd and >= 1, got {window}")
    if stride < 1:
        raise DimensionError(f"sliding_mean stride must be >= 1, got {stride}")
    if x.data.shape[0] < 1:
        raise DimensionError("sliding_mean needs at least one input row")
    t_in = x.data.shape[0]
    trail = x.data.shape[1:]
    flat = np.ascontiguousarray(x.data.reshape(t_in, -1))
    r = (window - 1) // 2
    centers = np.arange(0, t_in, stride)
    counts = (np.minimum(centers + r + 1, t_in) - np.maximum(centers - r, 0)).astype(x.data.dtype)
    sums = _kernels.sliding_sum(flat, window, stride)
    out = (sums / counts[:, None]).reshape((len(centers),) + trail)

    def vjp(g):
        h = np.ascontiguousarray(g.reshape(len(centers), -1) / counts[:, None])
        return _kernels.sliding_scatter(h, window, stride, t_in).reshape((t_in,) + trail)

    return _make("sliding_mean", out, [(x, vjp)])


def l2_normalize(x):
    """Scale a 1-D tensor to unit Euclidean norm; near-zero input is an error."""
    if x.data.ndim != 1:
        raise DimensionError(f"l2_normalize expects a 1-D tensor, got shape {x.data.shape}")
    n = float(np.linalg.norm(x.data))
    if n <= EPS_NORM:
        raise DegenerateInputError(f"l2_normalize: norm {n} below {EPS_NORM}")
    u = x.data / x.data.dtype.type(n)

    def vjp(g):
        return (g - u * np.dot(u, g)) / x.data.dtype.type(n)

    return _make("l2_normalize", u, [(x, vjp)])


def l2_normalize_columns(w):
    """Normalize each column of a 2-D tensor to unit norm."""
    if w.data.ndim != 2:
        raise DimensionError(f"l2_normalize_columns expects a 2-D tensor, got shape {w.data.shape}")
    norms = np.linalg.norm(w.data, axis=0)
    if np.any(norms <= EPS_NORM):
        raise DegenerateInputError("l2_normalize_columns: a column norm is below the guard")
    norms = norms.astype(w.data.dtype)
    u = w.data / norms

    def vjp(g):
        return (g - u * (u * g).sum(axis=0)) / norms

    return _make("l2_normalize_columns", u, [(w, vjp)])


def cosine(a, b):
    """Cosine similarity of two 1-D tensors, in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(f"cosine expects equal-length 1-D tensors, got {a.data.shape}, {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateInputError("cosine: input norm below the guard")
    ad, bd = a.data, b.data
    dt = ad.dtype.type
    u = ad / dt(na)
    v = bd / dt(nb)
    c = np.dot(u, v)

    def vjp_a(g):
        return g * (v - c * u) / dt(na)

    def vjp_b(g):
        return g * (u - c * v) / dt(nb)

    return _make("cosine", np.asarray(c), [(a, vjp_a), (b, vjp_b)])
