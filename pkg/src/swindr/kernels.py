"""Kernel dispatch: compiled extensions when importable, else ``_fallback``.

Set ``SWINDR_PURE=1`` to force the numpy fallback.
"""
import os

from . import _fallback

_nn = _img = _fallback
if not os.environ.get("SWINDR_PURE"):
    try:
        from . import _nn
    except ImportError:
        pass
    try:
        from . import _img
    except ImportError:
        pass

COMPILED = _nn is not _fallback and _img is not _fallback
BACKEND = "cython" if COMPILED else ("numpy" if _nn is _fallback and _img is _fallback else "mixed")

gelu_fwd = _nn.gelu_fwd
layer_norm_fwd = _nn.layer_norm_fwd
layer_norm_bwd = _nn.layer_norm_bwd
softmax_fwd = _nn.softmax_fwd
softmax_bwd = _nn.softmax_bwd
clahe_luts = _img.clahe_luts
clahe_apply = _img.clahe_apply
rotate_bilinear = _img.rotate_bilinear
tile_bounds = _fallback.tile_bounds
