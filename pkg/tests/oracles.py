"""Independent reference computations used as test oracles.

Nothing here calls into the code paths it checks.
"""
import math

import numpy as np
from scipy import ndimage


def naive_matmul(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            C[i, j] = sum(A[i, t] * B[t, j] for t in range(k))
    return C


def erf_series(x, terms=60):
    """Maclaurin series of erf."""
    s = 0.0
    for n in range(terms):
        s += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * s


def normal_cdf(x):
    return 0.5 * (1.0 + erf_series(x / math.sqrt(2.0)))


def central_diff(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def shifted_group(r, s, M):
    """Index of the (non-wrapped) shifted window containing coordinate r."""
    return (r - s) // M


def region_restricted_attention(x, P, heads, M, s):
    """Brute-force SW-MSA on an (H, W, C) map.

    Each token attends to exactly the tokens that fall in the same window of
    the grid whose boundaries are offset by ``s``; edge windows are smaller
    and nothing wraps around.
    """
    H, W, C = x.shape
    d = C // heads
    tok = x.reshape(-1, C)
    q = tok @ P["Wq"] + P["bq"]
    k = tok @ P["Wk"] + P["bk"]
    v = tok @ P["Wv"] + P["bv"]
    groups = [(shifted_group(r, s, M), shifted_group(c, s, M)) for r in range(H) for c in range(W)]
    out = np.zeros_like(tok)
    for i in range(H * W):
        peers = [j for j in range(H * W) if groups[j] == groups[i]]
        heads_out = []
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            logits = np.array([q[i, sl] @ k[j, sl] for j in peers]) / math.sqrt(d)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            heads_out.append(sum(wj * v[j, sl] for wj, j in zip(w, peers)))
        out[i] = np.concatenate(heads_out)
    return (out @ P["Wo"] + P["bo"]).reshape(H, W, C)


def forbidden_pairs_by_enumeration(H, W, M, s):
    """Per window of the cyclically shifted map, the number of ordered token
    pairs whose source coordinates fall in different shifted windows."""
    counts = []
    for wy in range(H // M):
        for wx in range(W // M):
            ids = []
            for i in range(M):
                for j in range(M):
                    r = (wy * M + i + s) % H
                    c = (wx * M + j + s) % W
                    ids.append((shifted_group(r, s, M), shifted_group(c, s, M)))
            counts.append(sum(1 for a in ids for b in ids if a != b))
    return counts


def global_histogram_equalization(img):
    """``round(255 * #(pixels <= v) / N)`` via sorting; constant images unchanged."""
    flat = np.sort(img.ravel())
    if flat[0] == flat[-1]:
        return img.copy()
    counts = np.searchsorted(flat, img.ravel(), side="right")
    return np.floor(255.0 * counts / flat.size + 0.5).reshape(img.shape).astype(np.uint8)


def count_dark_blobs(img, rel=0.15, size=11, sigma=1.0, window=5):
    """Count dark spots as local maxima of relative darkness inside the disc.

    A grey closing of width ``size`` estimates the lesion-free background;
    darkness is ``(background - luma) / background``, lightly smoothed. Every
    local maximum deeper than ``rel`` is one spot, so spots that touch are
    still counted separately.
    """
    lum = img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    disc = ndimage.binary_erosion(ndimage.binary_fill_holes(lum > 20), iterations=1)
    bg = ndimage.grey_closing(lum, size=(size, size))
    depth = ndimage.gaussian_filter((bg - lum) / np.maximum(bg, 1.0), sigma)
    peaks = disc & (depth > rel) & (depth == ndimage.maximum_filter(depth, size=window))
    return ndimage.label(peaks)[1]


def binomial_sigma(n, p):
    return math.sqrt(n * p * (1 - p))


def clipped_equalization(img, clip, bins=256):
    """Single-tile CLAHE written out directly: clip, redistribute, map by the CDF."""
    n = img.size
    hist = [0.0] * bins
    for v in img.ravel():
        hist[int(v) * bins // 256] += 1.0
    if sum(1 for h in hist if h > 0) == 1:
        return img.copy()
    limit = clip * n / bins
    excess = sum(max(h - limit, 0.0) for h in hist)
    hist = [min(h, limit) + excess / bins for h in hist]
    cdf, acc = [], 0.0
    for h in hist:
        acc += h
        cdf.append(acc)
    lut = [min(255, max(0, math.floor(255.0 * c / n + 0.5))) for c in cdf]
    return np.array([[lut[int(v) * bins // 256] for v in row] for row in img], dtype=np.uint8)
