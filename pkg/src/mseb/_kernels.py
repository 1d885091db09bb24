"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Jitted kernels are eligible when numba imports successfully and the
environment variable ``MSEB_NUMBA`` is not set to ``"0"``; the actual
dispatch is per kernel by measured speed (see the block at the bottom).
Both implementations are kept importable (``*_numpy`` / ``*_numba``) so
tests can assert their equivalence and ``benchmarks/bench_kernels.py`` can
time them against each other.

All kernels are dtype-generic over float32/float64 and expect C-contiguous
arrays. They are deliberately serial (no prange, no fastmath) so a fixed
input always produces bit-identical output on a given path.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MSEB_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# conv1d (cross-correlation, input already padded by the caller)
# ---------------------------------------------------------------------------

def conv1d_fwd_numpy(xp, kern, stride, dilation):
    """out[t, co] = sum_{w, ci} xp[t*stride + w*dilation, ci] * kern[w, ci, co]."""
    w, _, cout = kern.shape
    t_out = (xp.shape[0] - (w - 1) * dilation - 1) // stride + 1
    out = np.zeros((t_out, cout), dtype=xp.dtype)
    for off in range(w):
        lo = off * dilation
        seg = xp[lo : lo + (t_out - 1) * stride + 1 : stride]
        out += seg @ kern[off]
    return out


def _conv1d_fwd_loops(xp, kern, stride, dilation):
    w, cin, cout = kern.shape
    t_out = (xp.shape[0] - (w - 1) * dilation - 1) // stride + 1
    out = np.zeros((t_out, cout), dtype=xp.dtype)
    for t in range(t_out):
        base = t * stride
        for off in range(w):
            for ci in range(cin):
                xv = xp[base + off * dilation, ci]
                for co in range(cout):
                    out[t, co] += xv * kern[off, ci, co]
    return out


def conv1d_bwd_x_numpy(gout, kern, stride, dilation, t_padded):
    """Gradient of conv1d_fwd w.r.t. the (padded) input."""
    w, cin, _ = kern.shape
    t_out = gout.shape[0]
    gx = np.zeros((t_padded, cin), dtype=gout.dtype)
    for off in range(w):
        lo = off * dilation
        gx[lo : lo + (t_out - 1) * stride + 1 : stride] += gout @ kern[off].T
    return gx


def _conv1d_bwd_x_loops(gout, kern, stride, dilation, t_padded):
    w, cin, cout = kern.shape
    t_out = gout.shape[0]
    gx = np.zeros((t_padded, cin), dtype=gout.dtype)
    for t in range(t_out):
        base = t * stride
        for off in range(w):
            for ci in range(cin):
                acc = gx[base + off * dilation, ci]
                for co in range(cout):
                    acc += gout[t, co] * kern[off, ci, co]
                gx[base + off * dilation, ci] = acc
    return gx


def conv1d_bwd_k_numpy(xp, gout, stride, dilation, w):
    """Gradient of conv1d_fwd w.r.t. the kernel stack."""
    t_out = gout.shape[0]
    gk = np.empty((w, xp.shape[1], gout.shape[1]), dtype=gout.dtype)
    for off in range(w):
        lo = off * dilation
        seg = xp[lo : lo + (t_out - 1) * stride + 1 : stride]
        gk[off] = seg.T @ gout
    return gk


def _conv1d_bwd_k_loops(xp, gout, stride, dilation, w):
    t_out = gout.shape[0]
    cin = xp.shape[1]
    cout = gout.shape[1]
    gk = np.zeros((w, cin, cout), dtype=gout.dtype)
    for t in range(t_out):
        base = t * stride
        for off in range(w):
            for ci in range(cin):
                xv = xp[base + off * dilation, ci]
                for co in range(cout):
                    gk[off, ci, co] += xv * gout[t, co]
    return gk


# ---------------------------------------------------------------------------
# sliding truncated-window sum along axis 0 (local TAP and its adjoint)
# ---------------------------------------------------------------------------

def sliding_sum_numpy(x, window, stride=1):
    """out[i] = sum of x rows in [i*stride - r, i*stride + r] clipped to [0, T)."""
    r = (window - 1) // 2
    t_in = x.shape[0]
    centers = np.arange(0, t_in, stride)
    cs = np.concatenate([np.zeros((1,) + x.shape[1:], dtype=x.dtype), np.cumsum(x, axis=0)], axis=0)
    hi = np.minimum(centers + r + 1, t_in)
    lo = np.maximum(centers - r, 0)
    return cs[hi] - cs[lo]


def _sliding_sum_loops(x, window, stride):
    r = (window - 1) // 2
    t_in, d = x.shape
    n_out = (t_in + stride - 1) // stride
    out = np.zeros((n_out, d), dtype=x.dtype)
    for i in range(n_out):
        lo = i * stride - r
        hi = i * stride + r + 1
        if lo < 0:
            lo = 0
        if hi > t_in:
            hi = t_in
        for t in range(lo, hi):
            for j in range(d):
                out[i, j] += x[t, j]
    return out


def sliding_scatter_numpy(h, window, stride, t_in):
    """Adjoint of the strided sliding sum: scatter h rows back over windows."""
    r = (window - 1) // 2
    out = np.zeros((t_in,) + h.shape[1:], dtype=h.dtype)
    for i in range(h.shape[0]):
        lo = max(i * stride - r, 0)
        hi = min(i * stride + r + 1, t_in)
        out[lo:hi] += h[i]
    return out


def _sliding_scatter_loops(h, window, stride, t_in):
    r = (window - 1) // 2
    d = h.shape[1]
    out = np.zeros((t_in, d), dtype=h.dtype)
    for i in range(h.shape[0]):
        lo = i * stride - r
        hi = i * stride + r + 1
        if lo < 0:
            lo = 0
        if hi > t_in:
            hi = t_in
        for t in range(lo, hi):
            for j in range(d):
                out[t, j] += h[i, j]
    return out


# ---------------------------------------------------------------------------
# per-frame squared-distance cost tensor for permutation assignment
# ---------------------------------------------------------------------------

def pit_cost_numpy(targets, frames):
    """cost[t, k, j] = || targets[k] - frames[t, j] ||^2."""
    diff = targets[None, :, None, :] - frames[:, None, :, :]
    return (diff * diff).sum(axis=-1)


def _pit_cost_loops(targets, frames):
    t_n, j_n, e_n = frames.shape
    k_n = targets.shape[0]
    out = np.zeros((t_n, k_n, j_n), dtype=frames.dtype)
    for t in range(t_n):
        for k in range(k_n):
            for j in range(j_n):
                acc = frames.dtype.type(0.0)
                for e in range(e_n):
                    d = targets[k, e] - frames[t, j, e]
                    acc += d * d
                out[t, k, j] = acc
    return out


if HAVE_NUMBA:
    conv1d_fwd_numba = njit(cache=True)(_conv1d_fwd_loops)
    conv1d_bwd_x_numba = njit(cache=True)(_conv1d_bwd_x_loops)
    conv1d_bwd_k_numba = njit(cache=True)(_conv1d_bwd_k_loops)
    sliding_sum_numba = njit(cache=True)(_sliding_sum_loops)
    sliding_scatter_numba = njit(cache=True)(_sliding_scatter_loops)
    pit_cost_numba = njit(cache=True)(_pit_cost_loops)
else:  # pragma: no cover
    conv1d_fwd_numba = None
    conv1d_bwd_x_numba = None
    conv1d_bwd_k_numba = None
    sliding_sum_numba = None
    sliding_scatter_numba = None
    pit_cost_numba = None

# Dispatch is per kernel, by measured speed at desk-scale shapes (see
# benchmarks/bench_kernels.py): the conv kernels reduce to BLAS matmuls in the
# numpy form and beat the naive jitted loops there, while the sliding-window
# and assignment-cost kernels are loop-bound and the jitted form wins by one
# to two orders of magnitude. MSEB_NUMBA=0 forces the numpy path everywhere.
conv1d_fwd = conv1d_fwd_numpy
conv1d_bwd_x = conv1d_bwd_x_numpy
conv1d_bwd_k = conv1d_bwd_k_numpy
if USE_NUMBA:
    sliding_sum = sliding_sum_numba
    sliding_scatter = sliding_scatter_numba
    pit_cost = pit_cost_numba
else:
    sliding_sum = sliding_sum_numpy
    sliding_scatter = sliding_scatter_numpy
    pit_cost = pit_cost_numpy
