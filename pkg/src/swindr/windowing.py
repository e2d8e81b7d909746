"""Window partitioning, cyclic shifts, shifted-window masks and windowed attention.

Feature maps are channels-last, ``(B, H, W, C)``. Windows are ``M x M``
token squares; window order is row-major over the window grid and token
order is row-major inside each window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_NEG = -1e9


@dataclass(frozen=True)
class WindowGrid:
    h: int
    w: int
    M: int
    shift: int = 0

    def __post_init__(self):
        if min(self.h, self.w, self.M) < 1:
            raise ValueError(f"grid extents must be positive: {self}")
        if not 0 <= self.shift < self.M:
            raise ValueError(f"shift must satisfy 0 <= shift < M, got {self.shift} (M={self.M})")

    @property
    def padded(self) -> tuple[int, int]:
        """Extents after zero-padding up to a multiple of M."""
        return -(-self.h // self.M) * self.M, -(-self.w // self.M) * self.M

    @property
    def num_windows(self) -> int:
        Hp, Wp = self.padded
        return (Hp // self.M) * (Wp // self.M)


@dataclass(frozen=True)
class FlopsReport:
    h: int
    w: int
    C: int
    M: int
    msa_flops: int
    wmsa_flops: int


def window_partition(x: Tensor, M: int) -> Tensor:
    """(B, H, W, C) -> (B * H/M * W/M, M*M, C)."""
    B, H, W, C = x.shape
    if H % M or W % M:
        raise ShapeError(f"feature map {H}x{W} is not divisible by window size {M}")
    x = T.reshape(x, (B, H // M, M, W // M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // M) * (W // M), M * M, C))


def window_reverse(windows: Tensor, M: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    n, t, C = windows.shape
    per_image = (H // M) * (W // M)
    if H % M or W % M or t != M * M or n % per_image:
        raise ShapeError(f"{n} windows of {t} tokens do not tile a {H}x{W} map with M={M}")
    B = n // per_image
    x = T.reshape(windows, (B, H // M, W // M, M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll: ``y[i, j] = x[(i - dy) % H, (j - dx) % W]``."""
    H, W = x.shape[1], x.shape[2]
    return T.roll(x, (dy % H, dx % W), (1, 2))


def region_ids(grid: WindowGrid) -> np.ndarray:
    """Region label of every token of the cyclically shifted (padded) map.

    Tokens share a label iff they were contiguous in the unshifted map, i.e.
    the roll did not carry them across the wrap boundary, and they are both
    real or both padding.
    """
    Hp, Wp = grid.padded
    M, s = grid.M, grid.shift
    ids = np.zeros((Hp, Wp), dtype=np.int64)
    if s:
        rows = (slice(0, Hp - M), slice(Hp - M, Hp - s), slice(Hp - s, Hp))
        cols = (slice(0, Wp - M), slice(Wp - M, Wp - s), slice(Wp - s, Wp))
        for r, rs in enumerate(rows):
            for c, cs in enumerate(cols):
                ids[rs, cs] = 3 * r + c
    return ids


def shift_attention_mask(grid: WindowGrid) -> np.ndarray:
    """Additive ``(nW, M*M, M*M)`` mask for attention in the shifted frame.

    Entry is 0 when two tokens share a region and ``MASK_NEG`` otherwise.
    Padding tokens (maps not divisible by M) are masked out as keys.
    """
    Hp, Wp = grid.padded
    M = grid.M
    ids = region_ids(grid)
    if grid.shift == 0 and (Hp, Wp) == (grid.h, grid.w):
        return np.zeros((grid.num_windows, M * M, M * M))
    win = ids.reshape(Hp // M, M, Wp // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_NEG, 0.0)
    if (Hp, Wp) != (grid.h, grid.w):
        real = np.zeros((Hp, Wp), dtype=bool)
        real[: grid.h, : grid.w] = True
        real = np.roll(real, (-grid.shift, -grid.shift), (0, 1))
        real = real.reshape(Hp // M, M, Wp // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
        mask = np.where(real[:, None, :], mask, MASK_NEG)
    return mask


def window_attention(
    xw: Tensor,
    params: dict[str, Tensor],
    heads: int,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Multi-head self-attention inside each window.

    ``xw`` is ``(nWin, T, C)``; ``params`` holds ``Wq, Wk, Wv, Wo`` (C x C)
    and optional biases ``bq, bk, bv, bo``. A mask of shape ``(nW, T, T)``
    applies to consecutive groups of ``nW`` windows (one group per image).
    """
    n, t, C = xw.shape
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by {heads} heads")
    d = C // heads

    def proj(name):
        y = T.matmul(xw, params["W" + name])
        b = params.get("b" + name)
        return y if b is None else T.add(y, b)

    def split(y):
        return T.transpose(T.reshape(y, (n, t, heads, d)), (0, 2, 1, 3))

    q, k, v = split(proj("q")), split(proj("k")), split(proj("v"))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if mask is not None:
        nW = mask.shape[0]
        if mask.shape != (nW, t, t) or n % nW:
            raise ShapeError(f"mask {mask.shape} does not fit {n} windows of {t} tokens")
        scores = T.reshape(scores, (n // nW, nW, heads, t, t))
        scores = T.add(scores, T.Tensor(mask[None, :, None], dtype=xw.dtype))
        scores = T.reshape(scores, (n, heads, t, t))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, t, C))
    out = T.matmul(out, params["Wo"])
    if "bo" in params:
        out = T.add(out, params["bo"])
    return (out, attn) if return_weights else out


def global_attention(x: Tensor, params: dict[str, Tensor], heads: int, chunk: int = 1024) -> Tensor:
    """Full self-attention over all tokens of a ``(B, H, W, C)`` map.

    Same result as :func:`window_attention` on one window covering the map,
    but queries are processed ``chunk`` at a time so the score matrix never
    exceeds ``chunk x HW`` per head. Forward only; used for benchmarking.
    """
    B, H, W, C = x.shape
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by {heads} heads")
    d, n = C // heads, H * W
    tok = T.reshape(x, (B, n, C))

    def proj(name, t):
        y = T.matmul(t, params["W" + name])
        b = params.get("b" + name)
        y = y if b is None else T.add(y, b)
        return T.transpose(T.reshape(y, (B, t.shape[1], heads, d)), (0, 2, 1, 3))

    kT = T.transpose(proj("k", tok), (0, 1, 3, 2))
    v = proj("v", tok)
    parts = []
    for s in range(0, n, chunk):
        q = proj("q", T.index(tok, (slice(None), slice(s, s + chunk))))
        attn = T.softmax(T.mul(T.matmul(q, kT), 1.0 / math.sqrt(d)), axis=-1)
        parts.append(T.matmul(attn, v))
    out = T.reshape(T.transpose(T.concat(parts, 2), (0, 2, 1, 3)), (B, n, C))
    out = T.matmul(out, params["Wo"])
    if "bo" in params:
        out = T.add(out, params["bo"])
    return T.reshape(out, (B, H, W, C))


def shifted_window_attention(
    x: Tensor, params: dict[str, Tensor], heads: int, M: int, shift: int
) -> Tensor:
    """W-MSA (``shift == 0``) or SW-MSA on a ``(B, H, W, C)`` map.

    Pads to a multiple of M, rolls by ``-shift``, attends inside windows with
    the region mask, rolls back and crops.
    """
    B, H, W, C = x.shape
    grid = WindowGrid(H, W, M, shift)
    Hp, Wp = grid.padded
    if (Hp, Wp) != (H, W):
        x = T.pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
    if shift:
        x = cyclic_shift(x, -shift, -shift)
    mask = None
    if shift or (Hp, Wp) != (H, W):
        mask = shift_attention_mask(grid)
    xw = window_partition(x, M)
    yw = window_attention(xw, params, heads, mask)
    y = window_reverse(yw, M, Hp, Wp)
    if shift:
        y = cyclic_shift(y, shift, shift)
    if (Hp, Wp) != (H, W):
        y = T.index(y, (slice(None), slice(0, H), slice(0, W)))
    return y


def _check_positive(**kw):
    for k, v in kw.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ValueError(f"{k} must be a positive integer, got {v!r}")


def flops_msa(h: int, w: int, C: int) -> int:
    """Global self-attention cost ``4hwC^2 + 2(hw)^2 C``."""
    _check_positive(h=h, w=w, C=C)
    hw = h * w
    return 4 * hw * C * C + 2 * hw * hw * C


def flops_wmsa(h: int, w: int, C: int, M: int) -> int:
    """Windowed self-attention cost ``4hwC^2 + 2M^2 hwC``."""
    _check_positive(h=h, w=w, C=C, M=M)
    if M * M > h * w:
        raise ValueError(f"window {M}x{M} holds more tokens than the {h}x{w} map")
    hw = h * w
    return 4 * hw * C * C + 2 * M * M * hw * C


def flops_report(h: int, w: int, C: int, M: int) -> FlopsReport:
    return FlopsReport(h, w, C, M, flops_msa(h, w, C), flops_wmsa(h, w, C, M))
