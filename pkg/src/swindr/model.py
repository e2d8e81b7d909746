"""Hierarchical shifted-window transformer classifier.

Pipeline: patch extraction, linear patch embedding (+ learned absolute
position), stages of paired regular/shifted window blocks with patch merging
between stages, global average pooling and a softmax dense head.

Parameter paths::

    patch_embed.We, patch_embed.pos
    stage{s}.block{b}.norm1.{gamma,beta}
    stage{s}.block{b}.attn.{Wq,Wk,Wv,Wo,bq,bk,bv,bo}
    stage{s}.block{b}.norm2.{gamma,beta}
    stage{s}.block{b}.mlp.{W1,b1,W2,b2}
    stage{s}.merge.norm.{gamma,beta}, stage{s}.merge.Wm
    head.Wc, head.bc

Even block indices use regular windows, odd ones shifted windows.
"""
from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .windowing import shifted_window_attention

MAGIC = b"SWNL"
FORMAT_VERSION = 1
_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class SchemaError(ValueError):
    def __init__(self, message: str, paths: list[str] | None = None):
        super().__init__(message)
        self.paths = paths or []


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: list[int] = field(default_factory=lambda: [2, 2])
    heads: list[int] = field(default_factory=lambda: [2, 4])
    window: int = 4
    mlp_ratio: int = 4
    dropout_rate: float = 0.1
    num_classes: int = 5
    pos_embed: bool = True
    in_channels: int = 3

    def __post_init__(self):
        self.depths = list(self.depths)
        self.heads = list(self.heads)
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ValueError("depths and heads need one entry per stage")
        for s, h in enumerate(self.heads):
            if self.stage_dim(s) % h:
                raise ValueError(f"stage {s} width {self.stage_dim(s)} not divisible by {h} heads")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        side = self.grid
        for s in range(len(self.depths) - 1):
            if side % 2:
                raise ValueError(f"stage {s} grid {side} is odd; cannot merge patches")
            side //= 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * 2**s

    def stage_grid(self, s: int) -> int:
        return self.grid // 2**s

    @classmethod
    def desk(cls, **kw) -> ModelConfig:
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> ModelConfig:
        base = dict(image_size=16, patch_size=4, embed_dim=8, depths=[1], heads=[2], window=2, dropout_rate=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full(cls, **kw) -> ModelConfig:
        # 224 px input with 16 px patches; the stage layout is a choice.
        base = dict(image_size=224, patch_size=16, embed_dim=96, depths=[2, 2], heads=[3, 6], window=7)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every parameter, keyed by path, sorted by path."""
    C, p, K = cfg.embed_dim, cfg.patch_size, cfg.num_classes
    shapes: dict[str, tuple[int, ...]] = {"patch_embed.We": (p * p * cfg.in_channels, C)}
    if cfg.pos_embed:
        shapes["patch_embed.pos"] = (cfg.grid * cfg.grid, C)
    for s, depth in enumerate(cfg.depths):
        c = cfg.stage_dim(s)
        hidden = cfg.mlp_ratio * c
        for b in range(2 * depth):
            pre = f"stage{s}.block{b}"
            for n in ("norm1", "norm2"):
                shapes[f"{pre}.{n}.gamma"] = (c,)
                shapes[f"{pre}.{n}.beta"] = (c,)
            for w in "qkvo":
                shapes[f"{pre}.attn.W{w}"] = (c, c)
                shapes[f"{pre}.attn.b{w}"] = (c,)
            shapes[f"{pre}.mlp.W1"] = (c, hidden)
            shapes[f"{pre}.mlp.b1"] = (hidden,)
            shapes[f"{pre}.mlp.W2"] = (hidden, c)
            shapes[f"{pre}.mlp.b2"] = (c,)
        if s < len(cfg.depths) - 1:
            shapes[f"stage{s}.merge.norm.gamma"] = (4 * c,)
            shapes[f"stage{s}.merge.norm.beta"] = (4 * c,)
            shapes[f"stage{s}.merge.Wm"] = (4 * c, 2 * c)
    c_last = cfg.stage_dim(len(cfg.depths) - 1)
    shapes["head.Wc"] = (c_last, K)
    shapes["head.bc"] = (K,)
    return dict(sorted(shapes.items()))


def is_no_decay(path: str) -> bool:
    """LayerNorm parameters and biases are excluded from weight decay."""
    leaf = path.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta") or leaf.startswith("b")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated normal (std 0.02, cut at 2 std) weights, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for path, shape in param_schema(cfg).items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[path] = Tensor(arr, requires_grad=True, dtype=dtype)
    return params


def check_params(cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    schema = param_schema(cfg)
    bad = sorted(k for k in schema if k not in params)
    bad += sorted(k for k in schema if k in params and tuple(params[k].shape) != schema[k])
    bad += sorted(k for k in params if k not in schema)
    if bad:
        raise SchemaError(f"parameters do not match the model config: {', '.join(bad)}", bad)


def sub_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ------------------------------------------------------------------ layers


def patch_extract(image, p: int) -> Tensor:
    """Non-overlapping ``p x p`` patches, row-major, flattened row-major then channel.

    Accepts ``(H, W, c)`` or a batch ``(B, H, W, c)``; returns ``(N, p*p*c)``
    or ``(B, N, p*p*c)``.
    """
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    B, H, W, c = x.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
    x = T.reshape(x, (B, H // p, p, W // p, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, (H // p) * (W // p), p * p * c))
    return T.reshape(x, x.shape[1:]) if single else x


def patch_embed(patches: Tensor, We: Tensor, pos: Tensor | None = None) -> Tensor:
    if patches.shape[-1] != We.shape[0]:
        raise ShapeError(f"patches {patches.shape} do not match embedding {We.shape}")
    y = T.matmul(patches, We)
    if pos is not None:
        if pos.shape != y.shape[-2:]:
            raise ShapeError(f"position table {pos.shape} does not match tokens {y.shape}")
        y = T.add(y, pos)
    return y


def mlp(x: Tensor, p: dict[str, Tensor], rate: float, train: bool, rng) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, p["W1"]), p["b1"]))
    h = T.dropout(h, rate, train, rng)
    y = T.add(T.matmul(h, p["W2"]), p["b2"])
    return T.dropout(y, rate, train, rng)


def swin_block(z: Tensor, p: dict[str, Tensor], heads: int, M: int, shift: int,
               rate: float = 0.0, train: bool = False, rng=None) -> Tensor:
    """One attention sublayer and one MLP sublayer, each pre-normed with a residual."""
    a = T.layer_norm(z, p["norm1.gamma"], p["norm1.beta"])
    z = T.add(z, shifted_window_attention(a, sub_params(p, "attn"), heads, M, shift))
    m = T.layer_norm(z, p["norm2.gamma"], p["norm2.beta"])
    return T.add(z, mlp(m, sub_params(p, "mlp"), rate, train, rng))


def effective_window(h: int, w: int, M: int) -> tuple[int, int]:
    """Window and shift used on an ``h x w`` map.

    When the map is no larger than one window, the window shrinks to the map
    and shifting is disabled.
    """
    if min(h, w) <= M:
        return min(h, w), 0
    return M, M // 2


def swin_block_pair(z: Tensor, pa: dict[str, Tensor], pb: dict[str, Tensor], heads: int,
                    M: int, shift: int | None = None, rate: float = 0.0, train: bool = False,
                    rng=None) -> Tensor:
    """Regular-window block followed by a shifted-window block; ``(B, h, w, C)`` in and out."""
    if shift is None:
        shift = M // 2
    z = swin_block(z, pa, heads, M, 0, rate, train, rng)
    return swin_block(z, pb, heads, M, shift, rate, train, rng)


def patch_merging(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Concatenate 2x2 neighbourhoods ((0,0),(0,1),(1,0),(1,1)), normalize, project 4C -> 2C."""
    B, h, w, C = z.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs even extents, got {h}x{w}")
    x = T.reshape(z, (B, h // 2, 2, w // 2, 2, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, h // 2, w // 2, 4 * C))
    x = T.layer_norm(x, p["norm.gamma"], p["norm.beta"])
    return T.matmul(x, p["Wm"])


def classify_logits(z: Tensor, Wc: Tensor, bc: Tensor) -> Tensor:
    B, C = z.shape[0], z.shape[-1]
    if Wc.shape[0] != C or bc.shape != (Wc.shape[1],):
        raise ShapeError(f"head {Wc.shape}/{bc.shape} does not match features {z.shape}")
    pooled = T.mean(T.reshape(z, (B, -1, C)), axis=1)
    return T.add(T.matmul(pooled, Wc), bc)


def classify(z: Tensor, Wc: Tensor, bc: Tensor) -> Tensor:
    """Global average pool, dense layer, softmax. ``(h, w, C)`` gives ``(K,)``."""
    single = z.ndim == 3
    if single:
        z = T.reshape(z, (1,) + z.shape)
    probs = T.softmax(classify_logits(z, Wc, bc), axis=-1)
    return T.reshape(probs, probs.shape[1:]) if single else probs


def features(images, cfg: ModelConfig, params: dict[str, Tensor], train: bool = False, rng=None) -> Tensor:
    """Final-stage token map ``(B, h, w, C)`` before pooling."""
    x = T.as_tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ShapeError(f"images {x.shape} do not match config {cfg.image_size}px x {cfg.in_channels}")
    B = x.shape[0]
    tokens = patch_embed(patch_extract(x, cfg.patch_size), params["patch_embed.We"], params.get("patch_embed.pos"))
    side = cfg.grid
    z = T.reshape(tokens, (B, side, side, cfg.embed_dim))
    for s, depth in enumerate(cfg.depths):
        M, shift = effective_window(z.shape[1], z.shape[2], cfg.window)
        for i in range(depth):
            pa = sub_params(params, f"stage{s}.block{2 * i}")
            pb = sub_params(params, f"stage{s}.block{2 * i + 1}")
            z = swin_block_pair(z, pa, pb, cfg.heads[s], M, shift, cfg.dropout_rate, train, rng)
        if s < len(cfg.depths) - 1:
            z = patch_merging(z, sub_params(params, f"stage{s}.merge"))
    return z


def model_logits(images, cfg: ModelConfig, params: dict[str, Tensor], train: bool = False, rng=None) -> Tensor:
    z = features(images, cfg, params, train, rng)
    return classify_logits(z, params["head.Wc"], params["head.bc"])


def model_forward(image, cfg: ModelConfig, params: dict[str, Tensor], train: bool = False, rng=None) -> Tensor:
    """Class probabilities: ``(K,)`` for one image, ``(B, K)`` for a batch."""
    check_params(cfg, params)
    single = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    probs = T.softmax(model_logits(image, cfg, params, train, rng), axis=-1)
    return T.reshape(probs, probs.shape[1:]) if single else probs


# --------------------------------------------------------------- file format


def save_params(path, params: dict[str, Tensor]) -> None:
    """Write the binary parameter file.

    Layout (little-endian): ``SWNL``, u32 version, u32 tensor count, u32
    scalar bits; per tensor (sorted by path) u32 length + UTF-8 path; per
    tensor u32 rank + u32 extents; then raw scalars per tensor.
    """
    names = sorted(params)
    bits = {np.dtype(params[k].dtype).itemsize * 8 for k in names} or {32}
    if len(bits) != 1 or next(iter(bits)) not in _DTYPES:
        raise ValueError(f"parameters must share one float width, got {sorted(bits)}")
    width = bits.pop()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, len(names), width))
    for k in names:
        raw = k.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    for k in names:
        shape = params[k].shape
        buf.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    for k in names:
        buf.write(np.ascontiguousarray(params[k].data, dtype=_DTYPES[width]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path, cfg: ModelConfig | None = None) -> dict[str, Tensor]:
    raw = Path(path).read_bytes()
    try:
        return _parse_params(raw, cfg)
    except (struct.error, UnicodeDecodeError, IndexError) as exc:
        raise SchemaError(f"corrupt parameter file {path}: {exc}") from exc


def _parse_params(raw: bytes, cfg: ModelConfig | None) -> dict[str, Tensor]:
    if raw[:4] != MAGIC:
        raise SchemaError("not a parameter file (bad magic)")
    version, count, width = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION or width not in _DTYPES:
        raise SchemaError(f"unsupported parameter file version {version} / width {width}")
    off = 16
    names = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        names.append(raw[off + 4 : off + 4 + n].decode("utf-8"))
        off += 4 + n
    shapes = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", raw, off)
        shapes.append(struct.unpack_from(f"<{rank}I", raw, off + 4))
        off += 4 + 4 * rank
    dt = _DTYPES[width]
    params = {}
    for name, shape in zip(names, shapes):
        n = int(np.prod(shape, dtype=np.int64))
        end = off + n * dt.itemsize
        if end > len(raw):
            raise SchemaError(f"parameter file truncated inside {name}", [name])
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=dt.newbyteorder("="))
        off = end
    if off != len(raw):
        raise SchemaError(f"{len(raw) - off} trailing bytes in parameter file")
    if cfg is not None:
        check_params(cfg, params)
    return dict(sorted(params.items()))
