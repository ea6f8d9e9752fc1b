"""Pure-numpy reference implementations of the hot numeric kernels.

Every function here has a numba twin in ``_numba.py`` with identical
semantics. This module is the fallback path and the ground truth the
accelerated path is benchmarked and tested against.

Array layout conventions:
  * conv inputs are channels-first ``(N, C, H, W, D)``, float64
  * conv weights are ``(O, C, kh, kw, kd)``
  * inputs to conv kernels are already zero-padded; padding happens in the
    calling layer so both backends share one padding implementation
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3d_forward(xp: np.ndarray, w: np.ndarray, sh: int, sw: int, sd: int) -> np.ndarray:
    """Strided valid 3D cross-correlation of padded input `xp` with `w`."""
    windows = sliding_window_view(xp, w.shape[2:], axis=(2, 3, 4))
    windows = windows[:, :, ::sh, ::sw, ::sd]
    # (N, C, Ho, Wo, Do, kh, kw, kd) x (O, C, kh, kw, kd) -> (N, Ho, Wo, Do, O)
    out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv3d_backward_x(gy: np.ndarray, w: np.ndarray, hp: int, wp: int, dp: int,
                      sh: int, sw: int, sd: int) -> np.ndarray:
    """Gradient w.r.t. the padded input. Returns the padded-shape gradient."""
    n = gy.shape[0]
    c = w.shape[1]
    _, _, ho, wo, do = gy.shape
    kh, kw, kd = w.shape[2:]
    gxp = np.zeros((n, c, hp, wp, dp), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            for l in range(kd):
                # (N, O, Ho, Wo, Do) x (O, C) -> (N, Ho, Wo, Do, C)
                g = np.tensordot(gy, w[:, :, i, j, l], axes=([1], [0]))
                gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw, l:l + sd * do:sd] += \
                    np.moveaxis(g, -1, 1)
    return gxp


def conv3d_backward_w(gy: np.ndarray, xp: np.ndarray, kh: int, kw: int, kd: int,
                      sh: int, sw: int, sd: int) -> np.ndarray:
    """Gradient w.r.t. the weights."""
    o = gy.shape[1]
    c = xp.shape[1]
    _, _, ho, wo, do = gy.shape
    gw = np.empty((o, c, kh, kw, kd), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            for l in range(kd):
                xs = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw, l:l + sd * do:sd]
                gw[:, :, i, j, l] = np.tensordot(
                    gy, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def nearest_codes(vecs: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row (squared Euclidean) per input vector.

    Ties resolve to the smallest index (argmin takes the first minimum).
    """
    # ||v - e||^2 = ||v||^2 - 2 v.e + ||e||^2; the ||v||^2 term is constant
    # per row and does not affect the argmin.
    dots = vecs @ codebook.T
    e2 = np.einsum("kd,kd->k", codebook, codebook)
    return np.argmin(e2[None, :] - 2.0 * dots, axis=1).astype(np.int64)


def trilinear_resample(vol: np.ndarray, ux: np.ndarray, uy: np.ndarray,
                       uz: np.ndarray) -> np.ndarray:
    """Sample `vol` at the separable fractional coordinates (ux, uy, uz).

    Coordinates are clamped to the valid range, i.e. border values replicate
    outside the grid.
    """
    h, w, d = vol.shape
    ux = np.clip(ux, 0.0, h - 1.0)
    uy = np.clip(uy, 0.0, w - 1.0)
    uz = np.clip(uz, 0.0, d - 1.0)

    x0 = np.floor(ux).astype(np.int64)
    y0 = np.floor(uy).astype(np.int64)
    z0 = np.floor(uz).astype(np.int64)
    x1 = np.minimum(x0 + 1, h - 1)
    y1 = np.minimum(y0 + 1, w - 1)
    z1 = np.minimum(z0 + 1, d - 1)
    fx = (ux - x0).reshape(-1, 1, 1)
    fy = (uy - y0).reshape(1, -1, 1)
    fz = (uz - z0).reshape(1, 1, -1)

    v = vol.astype(np.float64, copy=False)
    c000 = v[np.ix_(x0, y0, z0)]
    c100 = v[np.ix_(x1, y0, z0)]
    c010 = v[np.ix_(x0, y1, z0)]
    c110 = v[np.ix_(x1, y1, z0)]
    c001 = v[np.ix_(x0, y0, z1)]
    c101 = v[np.ix_(x1, y0, z1)]
    c011 = v[np.ix_(x0, y1, z1)]
    c111 = v[np.ix_(x1, y1, z1)]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz
