"""Pure numpy versions of the compiled kernels in ``_nn.pyx`` and ``_img.pyx``.

Signatures and results match the compiled module; the image kernels agree
bit-for-bit because both evaluate the same float expressions in the same order.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_SQRT1_2 = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_fwd(x: np.ndarray):
    """Return ``(x * Phi(x), d/dx)`` for a float array."""
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_SQRT1_2)))
    y = x * cdf
    dydx = cdf + x * x.dtype.type(_INV_SQRT_2PI) * np.exp(x * x * x.dtype.type(-0.5))
    return y, dydx


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Rows of a 2-d array; returns ``(y, xhat, rstd)`` with ``rstd`` of shape (n,)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gamma: np.ndarray):
    dxhat = g * gamma
    dx = rstd[:, None] * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax of a 2-d array."""
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=1, keepdims=True))


# ------------------------------------------------------------------- images


def tile_bounds(n: int, tiles: int) -> np.ndarray:
    """Start offsets of ``tiles`` near-equal tiles over ``n`` pixels, plus ``n``."""
    return np.array([(i * n) // tiles for i in range(tiles + 1)], dtype=np.int64)


def clahe_luts(img: np.ndarray, tiles_y: int, tiles_x: int, clip: float, bins: int) -> np.ndarray:
    """Per-tile 256-entry uint8 lookup tables, shape ``(tiles_y, tiles_x, 256)``.

    ``clip`` is the bin ceiling as a multiple of the uniform level
    ``tile_pixels / bins`` (``inf`` disables clipping). Clipped mass is spread
    evenly over all bins in one pass. A tile with a single occupied bin keeps
    the identity mapping.
    """
    H, W = img.shape
    ys, xs = tile_bounds(H, tiles_y), tile_bounds(W, tiles_x)
    luts = np.empty((tiles_y, tiles_x, 256), dtype=np.uint8)
    level_bin = (np.arange(256) * bins) // 256
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = img[ys[ty]:ys[ty + 1], xs[tx]:xs[tx + 1]]
            n = tile.size
            hist = np.bincount(level_bin[tile.ravel()], minlength=bins).astype(np.float64)
            if np.count_nonzero(hist) == 1:
                luts[ty, tx] = np.arange(256)
                continue
            limit = clip * n / bins
            hist = clip_histogram(hist, limit)
            cdf = np.cumsum(hist)
            lut_bins = np.floor(255.0 * cdf / n + 0.5)
            luts[ty, tx] = np.clip(lut_bins[level_bin], 0, 255).astype(np.uint8)
    return luts


def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    # sequential sum, matching the compiled loop bit for bit
    excess = np.cumsum(np.maximum(hist - limit, 0.0))[-1]
    if excess <= 0.0:
        return hist
    return np.minimum(hist, limit) + excess / hist.size


def _interp_axis(n: int, tiles: int):
    """Lower tile index, upper tile index and upper weight for every pixel."""
    b = tile_bounds(n, tiles)
    centers = (b[:-1] + b[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, tiles - 1)
    hi = np.clip(hi, 0, tiles - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, w


def clahe_apply(img: np.ndarray, luts: np.ndarray) -> np.ndarray:
    """Blend the four neighbouring tile mappings bilinearly for every pixel."""
    H, W = img.shape
    ty, tx = luts.shape[:2]
    y0, y1, wy = _interp_axis(H, ty)
    x0, x1, wx = _interp_axis(W, tx)
    v = img.astype(np.int64)
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    f00 = luts[Y0, X0, v].astype(np.float64)
    f01 = luts[Y0, X1, v].astype(np.float64)
    f10 = luts[Y1, X0, v].astype(np.float64)
    f11 = luts[Y1, X1, v].astype(np.float64)
    top = (1.0 - WX) * f00 + WX * f01
    bot = (1.0 - WX) * f10 + WX * f11
    out = (1.0 - WY) * top + WY * bot
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def rotate_bilinear(img: np.ndarray, cos_t: float, sin_t: float) -> np.ndarray:
    """Rotate a ``(H, W, c)`` uint8 image about its center; outside samples are black.

    Output pixel ``(y, x)`` samples the source at
    ``(cy + sin*dx + cos*dy, cx + cos*dx - sin*dy)``.
    """
    H, W, c = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    dy = np.arange(H, dtype=np.float64)[:, None] - cy
    dx = np.arange(W, dtype=np.float64)[None, :] - cx
    sy = cy + sin_t * dx + cos_t * dy
    sx = cx + cos_t * dx - sin_t * dy
    tol = 1e-9
    inside = (sy >= -tol) & (sy <= H - 1 + tol) & (sx >= -tol) & (sx <= W - 1 + tol)
    sy = np.clip(sy, 0.0, H - 1.0)
    sx = np.clip(sx, 0.0, W - 1.0)
    y0 = np.minimum(np.floor(sy).astype(np.int64), H - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    src = img.astype(np.float64)
    top = (1.0 - fx) * src[y0, x0] + fx * src[y0, x1]
    bot = (1.0 - fx) * src[y1, x0] + fx * src[y1, x1]
    val = (1.0 - fy) * top + fy * bot
    out = np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8)
    out[~inside] = 0
    return out
