"""Numba-compiled twins of the kernels in ``_numpy.py``.

Parallel loops partition work so that each (n, o) / (n, c) / (o, c) output
block is owned by exactly one iteration: no write races, and results are
deterministic for a fixed input regardless of thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def conv3d_forward(xp, w, sh, sw, sd):
    n, c, hp, wp, dp = xp.shape
    o, _, kh, kw, kd = w.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    do = (dp - kd) // sd + 1
    out = np.zeros((n, o, ho, wo, do), dtype=xp.dtype)
    for no in prange(n * o):
        ni = no // o
        oi = no % o
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    for l in range(kd):
                        wv = w[oi, ci, i, j, l]
                        for x in range(ho):
                            xi = x * sh + i
                            for y in range(wo):
                                yj = y * sw + j
                                for z in range(do):
                                    out[ni, oi, x, y, z] += wv * xp[ni, ci, xi, yj, z * sd + l]
    return out


@njit(cache=True, parallel=True)
def conv3d_backward_x(gy, w, hp, wp, dp, sh, sw, sd):
    n, o, ho, wo, do = gy.shape
    c = w.shape[1]
    kh, kw, kd = w.shape[2], w.shape[3], w.shape[4]
    gxp = np.zeros((n, c, hp, wp, dp), dtype=gy.dtype)
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for oi in range(o):
            for i in range(kh):
                for j in range(kw):
                    for l in range(kd):
                        wv = w[oi, ci, i, j, l]
                        for x in range(ho):
                            xi = x * sh + i
                            for y in range(wo):
                                yj = y * sw + j
                                for z in range(do):
                                    gxp[ni, ci, xi, yj, z * sd + l] += wv * gy[ni, oi, x, y, z]
    return gxp


@njit(cache=True, parallel=True)
def conv3d_backward_w(gy, xp, kh, kw, kd, sh, sw, sd):
    n, o, ho, wo, do = gy.shape
    c = xp.shape[1]
    gw = np.zeros((o, c, kh, kw, kd), dtype=gy.dtype)
    for oc in prange(o * c):
        oi = oc // c
        ci = oc % c
        # read each output-gradient site once and scatter into the small
        # kernel tile: far better locality than per-tap reduction loops
        for ni in range(n):
            for x in range(ho):
                for y in range(wo):
                    for z in range(do):
                        g = gy[ni, oi, x, y, z]
                        if g == 0.0:
                            continue
                        for i in range(kh):
                            xi = x * sh + i
                            for j in range(kw):
                                yj = y * sw + j
                                for l in range(kd):
                                    gw[oi, ci, i, j, l] += g * xp[ni, ci, xi, yj, z * sd + l]
    return gw


@njit(cache=True, parallel=True)
def nearest_codes(vecs, codebook):
    m, d = vecs.shape
    k = codebook.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in prange(m):
        best = 0
        best_d = np.inf
        for j in range(k):
            acc = 0.0
            for t in range(d):
                diff = vecs[i, t] - codebook[j, t]
                acc += diff * diff
            if acc < best_d:
                best_d = acc
                best = j
        out[i] = best
    return out


@njit(cache=True, parallel=True)
def trilinear_resample(vol, ux, uy, uz):
    h, w, d = vol.shape
    nx, ny, nz = ux.size, uy.size, uz.size
    out = np.empty((nx, ny, nz), dtype=np.float64)
    for ix in prange(nx):
        cx = min(max(ux[ix], 0.0), h - 1.0)
        x0 = int(np.floor(cx))
        x1 = min(x0 + 1, h - 1)
        fx = cx - x0
        for iy in range(ny):
            cy = min(max(uy[iy], 0.0), w - 1.0)
            y0 = int(np.floor(cy))
            y1 = min(y0 + 1, w - 1)
            fy = cy - y0
            for iz in range(nz):
                cz = min(max(uz[iz], 0.0), d - 1.0)
                z0 = int(np.floor(cz))
                z1 = min(z0 + 1, d - 1)
                fz = cz - z0
                c00 = vol[x0, y0, z0] * (1 - fx) + vol[x1, y0, z0] * fx
                c10 = vol[x0, y1, z0] * (1 - fx) + vol[x1, y1, z0] * fx
                c01 = vol[x0, y0, z1] * (1 - fx) + vol[x1, y0, z1] * fx
                c11 = vol[x0, y1, z1] * (1 - fx) + vol[x1, y1, z1] * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                out[ix, iy, iz] = c0 * (1 - fz) + c1 * fz
    return out
