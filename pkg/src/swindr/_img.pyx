# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled image loops for CLAHE and rotation.

Built without floating-point contraction so results match ``_fallback.py``
bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def tile_bounds(Py_ssize_t n, Py_ssize_t tiles):
    return np.array([(i * n) // tiles for i in range(tiles + 1)], dtype=np.int64)


def clahe_luts(img, int tiles_y, int tiles_x, double clip, int bins):
    """Per-tile uint8 lookup tables, shape ``(tiles_y, tiles_x, 256)``."""
    cdef const cnp.uint8_t[:, ::1] im = np.ascontiguousarray(img, dtype=np.uint8)
    cdef cnp.int64_t[::1] ys = tile_bounds(im.shape[0], tiles_y)
    cdef cnp.int64_t[::1] xs = tile_bounds(im.shape[1], tiles_x)
    luts_arr = np.empty((tiles_y, tiles_x, 256), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] luts = luts_arr
    cdef double[::1] hist = np.empty(bins, dtype=np.float64)
    cdef double[::1] lut_bins = np.empty(bins, dtype=np.float64)
    cdef Py_ssize_t ty, tx, i, j, k, occupied
    cdef double n, limit, excess, share, cdf, v
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                for k in range(bins):
                    hist[k] = 0.0
                for i in range(ys[ty], ys[ty + 1]):
                    for j in range(xs[tx], xs[tx + 1]):
                        hist[(im[i, j] * bins) // 256] += 1.0
                n = <double>((ys[ty + 1] - ys[ty]) * (xs[tx + 1] - xs[tx]))
                occupied = 0
                for k in range(bins):
                    if hist[k] > 0.0:
                        occupied += 1
                if occupied == 1:
                    for k in range(256):
                        luts[ty, tx, k] = <cnp.uint8_t>k
                    continue
                limit = clip * n / bins
                excess = 0.0
                for k in range(bins):
                    if hist[k] - limit > 0.0:
                        excess += hist[k] - limit
                    else:
                        excess += 0.0
                if excess > 0.0:
                    share = excess / bins
                    for k in range(bins):
                        if hist[k] > limit:
                            hist[k] = limit + share
                        else:
                            hist[k] = hist[k] + share
                cdf = 0.0
                for k in range(bins):
                    cdf += hist[k]
                    v = floor(255.0 * cdf / n + 0.5)
                    lut_bins[k] = 0.0 if v < 0.0 else (255.0 if v > 255.0 else v)
                for k in range(256):
                    luts[ty, tx, k] = <cnp.uint8_t>lut_bins[(k * bins) // 256]
    return luts_arr


cdef void _interp_axis(Py_ssize_t n, Py_ssize_t tiles, cnp.int64_t[::1] lo, cnp.int64_t[::1] hi,
                       double[::1] w) noexcept nogil:
    cdef Py_ssize_t p, t, a, b
    cdef double pos, c0, c1, span
    t = 0
    for p in range(n):
        pos = <double>p
        # first center strictly greater than pos
        while t < tiles and (((t * n) // tiles + ((t + 1) * n) // tiles - 1) / 2.0) <= pos:
            t += 1
        a = t - 1
        if a < 0:
            a = 0
        b = t
        if b > tiles - 1:
            b = tiles - 1
        c0 = (((a * n) // tiles + ((a + 1) * n) // tiles - 1) / 2.0)
        c1 = (((b * n) // tiles + ((b + 1) * n) // tiles - 1) / 2.0)
        span = c1 - c0
        lo[p] = a
        hi[p] = b
        w[p] = (pos - c0) / span if span > 0.0 else 0.0


def clahe_apply(img, luts_in):
    """Blend the four neighbouring tile mappings bilinearly for every pixel."""
    cdef const cnp.uint8_t[:, ::1] im = np.ascontiguousarray(img, dtype=np.uint8)
    cdef const cnp.uint8_t[:, :, ::1] luts = np.ascontiguousarray(luts_in, dtype=np.uint8)
    cdef Py_ssize_t H = im.shape[0], W = im.shape[1]
    cdef Py_ssize_t TY = luts.shape[0], TX = luts.shape[1]
    cdef cnp.int64_t[::1] y0 = np.empty(H, dtype=np.int64)
    cdef cnp.int64_t[::1] y1 = np.empty(H, dtype=np.int64)
    cdef double[::1] wy = np.empty(H, dtype=np.float64)
    cdef cnp.int64_t[::1] x0 = np.empty(W, dtype=np.int64)
    cdef cnp.int64_t[::1] x1 = np.empty(W, dtype=np.int64)
    cdef double[::1] wx = np.empty(W, dtype=np.float64)
    out_arr = np.empty((H, W), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef int v
    cdef double top, bot, val, a, b
    with nogil:
        _interp_axis(H, TY, y0, y1, wy)
        _interp_axis(W, TX, x0, x1, wx)
        for i in range(H):
            b = wy[i]
            for j in range(W):
                v = im[i, j]
                a = wx[j]
                top = (1.0 - a) * <double>luts[y0[i], x0[j], v] + a * <double>luts[y0[i], x1[j], v]
                bot = (1.0 - a) * <double>luts[y1[i], x0[j], v] + a * <double>luts[y1[i], x1[j], v]
                val = floor((1.0 - b) * top + b * bot + 0.5)
                out[i, j] = <cnp.uint8_t>(0.0 if val < 0.0 else (255.0 if val > 255.0 else val))
    return out_arr


def rotate_bilinear(img, double cos_t, double sin_t):
    """Rotate a ``(H, W, c)`` uint8 image about its center; outside samples are black."""
    cdef const cnp.uint8_t[:, :, ::1] src = np.ascontiguousarray(img, dtype=np.uint8)
    cdef Py_ssize_t H = src.shape[0], W = src.shape[1], C = src.shape[2]
    out_arr = np.zeros((H, W, C), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0, tol = 1e-9
    cdef double dy, dx, sy, sx, fy, fx, top, bot, val
    cdef Py_ssize_t i, j, ch, iy0, ix0, iy1, ix1
    with nogil:
        for i in range(H):
            dy = <double>i - cy
            for j in range(W):
                dx = <double>j - cx
                sy = cy + sin_t * dx + cos_t * dy
                sx = cx + cos_t * dx - sin_t * dy
                if sy < -tol or sy > H - 1 + tol or sx < -tol or sx > W - 1 + tol:
                    continue
                if sy < 0.0:
                    sy = 0.0
                elif sy > H - 1.0:
                    sy = H - 1.0
                if sx < 0.0:
                    sx = 0.0
                elif sx > W - 1.0:
                    sx = W - 1.0
                iy0 = <Py_ssize_t>floor(sy)
                ix0 = <Py_ssize_t>floor(sx)
                if iy0 > H - 1:
                    iy0 = H - 1
                if ix0 > W - 1:
                    ix0 = W - 1
                iy1 = iy0 + 1 if iy0 + 1 < H else H - 1
                ix1 = ix0 + 1 if ix0 + 1 < W else W - 1
                fy = sy - iy0
                fx = sx - ix0
                for ch in range(C):
                    top = (1.0 - fx) * <double>src[iy0, ix0, ch] + fx * <double>src[iy0, ix1, ch]
                    bot = (1.0 - fx) * <double>src[iy1, ix0, ch] + fx * <double>src[iy1, ix1, ch]
                    val = floor((1.0 - fy) * top + fy * bot + 0.5)
                    out[i, j, ch] = <cnp.uint8_t>(0.0 if val < 0.0 else (255.0 if val > 255.0 else val))
    return out_arr
