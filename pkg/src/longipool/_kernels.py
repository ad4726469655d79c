"""Hot numeric kernels for 3D convolution.

The jitted paths accumulate in float64 and write float32, parallelized so
that every output element is owned by exactly one thread; results are
bitwise reproducible regardless of thread count.  When numba is missing we
fall back to a numpy formulation (27 shifted float64 GEMMs) with the same
contract.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import config as _numba_config
    from numba import njit, prange

    # workqueue avoids probing optional TBB/OMP layers at import time
    _numba_config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False


def pad1(x5: np.ndarray) -> np.ndarray:
    """Zero-pad the three trailing spatial axes of [B,C,D,H,W] by one voxel."""
    b, c, d, h, w = x5.shape
    out = np.zeros((b, c, d + 2, h + 2, w + 2), dtype=x5.dtype)
    out[:, :, 1:-1, 1:-1, 1:-1] = x5
    return out


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _conv3d_fwd_jit(xp, kern, bias, out):  # pragma: no cover - jitted
        nb, co, dd, hh, ww = out.shape
        ci = kern.shape[1]
        for bo in prange(nb * co):
            b = bo // co
            o = bo % co
            acc = np.empty(ww, dtype=np.float64)
            for d in range(dd):
                for h in range(hh):
                    for w in range(ww):
                        acc[w] = bias[o]
                    for c in range(ci):
                        for kd in range(3):
                            for kh in range(3):
                                row = xp[b, c, d + kd, h + kh]
                                for kw in range(3):
                                    kv = np.float64(kern[o, c, kd, kh, kw])
                                    for w in range(ww):
                                        acc[w] += np.float64(row[w + kw]) * kv
                    for w in range(ww):
                        out[b, o, d, h, w] = np.float32(acc[w])

    @njit(parallel=True, cache=True)
    def _conv3d_grad_kernels_jit(xp, gout, gk):  # pragma: no cover - jitted
        nb, co, dd, hh, ww = gout.shape
        ci = xp.shape[1]
        for o in prange(co):
            for c in range(ci):
                acc = np.zeros((3, 3, 3, ww), dtype=np.float64)
                for b in range(nb):
                    for d in range(dd):
                        for h in range(hh):
                            grow = gout[b, o, d, h]
                            for kd in range(3):
                                for kh in range(3):
                                    xrow = xp[b, c, d + kd, h + kh]
                                    for kw in range(3):
                                        for w in range(ww):
                                            acc[kd, kh, kw, w] += np.float64(
                                                grow[w]
                                            ) * np.float64(xrow[w + kw])
                for kd in range(3):
                    for kh in range(3):
                        for kw in range(3):
                            s = 0.0
                            for w in range(ww):
                                s += acc[kd, kh, kw, w]
                            gk[o, c, kd, kh, kw] = np.float32(s)


def _conv3d_fwd_np(xp: np.ndarray, kern: np.ndarray, bias: np.ndarray) -> np.ndarray:
    nb, ci = xp.shape[0], xp.shape[1]
    dd, hh, ww = xp.shape[2] - 2, xp.shape[3] - 2, xp.shape[4] - 2
    co = kern.shape[0]
    n = nb * dd * hh * ww
    k64 = kern.astype(np.float64).reshape(co, ci, 27)
    out = np.zeros((co, n), dtype=np.float64)
    xp64 = xp.astype(np.float64)
    idx = 0
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                view = xp64[:, :, kd : kd + dd, kh : kh + hh, kw : kw + ww]
                mat = view.transpose(1, 0, 2, 3, 4).reshape(ci, n)
                out += k64[:, :, idx] @ mat
                idx += 1
    out += bias.astype(np.float64)[:, None]
    return (
        out.reshape(co, nb, dd, hh, ww).transpose(1, 0, 2, 3, 4).astype(np.float32)
    )


def _conv3d_grad_kernels_np(xp: np.ndarray, gout: np.ndarray) -> np.ndarray:
    nb, co, dd, hh, ww = gout.shape
    ci = xp.shape[1]
    n = nb * dd * hh * ww
    g64 = gout.astype(np.float64).transpose(1, 0, 2, 3, 4).reshape(co, n)
    xp64 = xp.astype(np.float64)
    gk = np.empty((co, ci, 27), dtype=np.float64)
    idx = 0
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                view = xp64[:, :, kd : kd + dd, kh : kh + hh, kw : kw + ww]
                mat = view.transpose(1, 0, 2, 3, 4).reshape(ci, n)
                gk[:, :, idx] = g64 @ mat.T
                idx += 1
    return gk.reshape(co, ci, 3, 3, 3).astype(np.float32)


def conv3d_forward(x5: np.ndarray, kern: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, pad-1 3D convolution on [B,C,D,H,W] float32 input."""
    xp = pad1(x5)
    if HAVE_NUMBA:
        nb, _, dd, hh, ww = x5.shape
        out = np.empty((nb, kern.shape[0], dd, hh, ww), dtype=np.float32)
        _conv3d_fwd_jit(xp, kern, bias, out)
        return out
    return _conv3d_fwd_np(xp, kern, bias)


def conv3d_grad_input(g5: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Input gradient: convolution of the padded output gradient with the
    spatially flipped, channel-transposed kernels."""
    kt = np.ascontiguousarray(kern.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    zero_bias = np.zeros(kt.shape[0], dtype=np.float32)
    gp = pad1(g5)
    if HAVE_NUMBA:
        nb, _, dd, hh, ww = g5.shape
        out = np.empty((nb, kt.shape[0], dd, hh, ww), dtype=np.float32)
        _conv3d_fwd_jit(gp, kt, zero_bias, out)
        return out
    return _conv3d_fwd_np(gp, kt, zero_bias)


def conv3d_grad_kernels(x5: np.ndarray, g5: np.ndarray, kshape) -> np.ndarray:
    xp = pad1(x5)
    if HAVE_NUMBA:
        gk = np.empty(kshape, dtype=np.float32)
        _conv3d_grad_kernels_jit(xp, g5, gk)
        return gk
    return _conv3d_grad_kernels_np(xp, g5)
