"""Fused row kernels for the hottest tensor ops, compiled with numba.

Each kernel works on a C-contiguous 2-D view ``(rows, width)`` and is a
plain sequential loop, so results are deterministic. ``fastmath`` stays
off to keep IEEE semantics identical to the numpy formulations.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@nb.njit(cache=True)
def gelu_forward(x, out, cdf):
    flat_x, flat_o, flat_c = x.ravel(), out.ravel(), cdf.ravel()
    for i in range(flat_x.size):
        v = flat_x[i]
        c = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        flat_c[i] = c
        flat_o[i] = v * c


@nb.njit(cache=True)
def layer_norm_rows(x, eps, xhat, inv):
    rows, d = x.shape
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        var /= d
        iv = 1.0 / math.sqrt(var + eps)
        inv[r] = iv
        for j in range(d):
            xhat[r, j] = (x[r, j] - mu) * iv


@nb.njit(cache=True)
def layer_norm_rows_backward(gh, xhat, inv, out):
    rows, d = xhat.shape
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            m1 += gh[r, j]
            m2 += gh[r, j] * xhat[r, j]
        m1 /= d
        m2 /= d
        iv = inv[r]
        for j in range(d):
            out[r, j] = iv * (gh[r, j] - m1 - xhat[r, j] * m2)


def rows2d(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])
