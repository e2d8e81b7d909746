"""Fundus image preprocessing: circular crop, CLAHE, augmentation, splits.

Images are numpy ``uint8`` arrays, ``(H, W)`` for grayscale or ``(H, W, 3)``
for RGB, row-major.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels

GRADES = range(5)
SPLITS = ("train", "val", "test")


@dataclass
class ClaheParams:
    clip_limit: float = 2.0
    tiles_x: int = 8
    tiles_y: int = 8
    bins: int = 256
    per_channel: bool = False

    def __post_init__(self):
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be positive")
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ValueError("tile counts must be at least 1")
        if not 1 <= self.bins <= 256:
            raise ValueError("bins must be in 1..256")


@dataclass
class AugmentPolicy:
    rotate: bool = True
    flip: bool = True
    max_angle: float = 360.0

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(rotate=False, flip=False)


@dataclass
class ManifestEntry:
    path: str
    grade: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    root: str | None = field(default=None, compare=False)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "ratios": list(self.ratios), "entries": [asdict(e) for e in self.entries]},
            indent=1,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> DatasetManifest:
        raw = json.loads(Path(path).read_text())
        entries = [ManifestEntry(e["path"], int(e["grade"]), e["split"]) for e in raw["entries"]]
        return cls(entries, raw["seed"], tuple(raw["ratios"]), root=str(Path(path).parent))

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p


# ---------------------------------------------------------------- cropping


def circular_crop(img: np.ndarray, threshold: int = 10) -> np.ndarray:
    """Crop to the bounding box of pixels brighter than ``threshold``, then pad square.

    Brightness is the max over channels. Padding is black and split evenly,
    the extra pixel going after.
    """
    if img.size == 0:
        raise ValueError("empty image")
    lum = img if img.ndim == 2 else img.max(axis=2)
    rows = np.flatnonzero((lum > threshold).any(axis=1))
    cols = np.flatnonzero((lum > threshold).any(axis=0))
    if rows.size == 0:
        raise ValueError(f"no pixel exceeds threshold {threshold}; image is fully dark")
    out = img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    h, w = out.shape[:2]
    side = max(h, w)
    if h == w:
        return out.copy()
    pad_h, pad_w = side - h, side - w
    widths = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)]
    if img.ndim == 3:
        widths.append((0, 0))
    return np.pad(out, widths)


# -------------------------------------------------------------------- CLAHE


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma rounded to 8 bits."""
    rgb = img.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def clahe_gray(img: np.ndarray, params: ClaheParams) -> np.ndarray:
    H, W = img.shape
    if H < params.tiles_y or W < params.tiles_x:
        raise ValueError(f"{H}x{W} image is smaller than one pixel per tile ({params.tiles_y}x{params.tiles_x})")
    luts = kernels.clahe_luts(img, params.tiles_y, params.tiles_x, float(params.clip_limit), params.bins)
    return kernels.clahe_apply(img, luts)


def clahe(img: np.ndarray, params: ClaheParams | None = None) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    RGB images equalize luma only: every channel is shifted by the change in
    luma, which leaves the chroma components untouched.
    """
    params = params or ClaheParams()
    if img.dtype != np.uint8:
        raise TypeError("clahe expects uint8 images")
    if img.ndim == 2:
        return clahe_gray(img, params)
    if params.per_channel:
        return np.stack([clahe_gray(np.ascontiguousarray(img[..., c]), params) for c in range(img.shape[2])], axis=2)
    y = luminance(img)
    delta = clahe_gray(y, params).astype(np.int16) - y.astype(np.int16)
    return np.clip(img.astype(np.int16) + delta[..., None], 0, 255).astype(np.uint8)


# ------------------------------------------------------------- augmentation


def _cos_sin(angle: float) -> tuple[float, float]:
    q, r = divmod(angle, 90.0)
    if r == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    t = math.radians(angle)
    return math.cos(t), math.sin(t)


def rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Counter-clockwise rotation in degrees about the center, bilinear, black fill."""
    c, s = _cos_sin(angle)
    src = img if img.ndim == 3 else img[..., None]
    out = kernels.rotate_bilinear(np.ascontiguousarray(src), c, s)
    return out if img.ndim == 3 else out[..., 0]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def augment(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy | None = None) -> np.ndarray:
    """Random rotation in ``[0, max_angle)`` and horizontal flip with probability 1/2."""
    policy = policy or AugmentPolicy()
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"augment expects a square image, got {img.shape[:2]}")
    angle = rng.uniform(0.0, policy.max_angle)
    flip = rng.random() < 0.5
    out = img
    if policy.rotate and angle != 0.0:
        out = rotate(out, angle)
    if policy.flip and flip:
        out = hflip(out)
    return out if out is not img else img.copy()


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


def preprocess_image(img: np.ndarray, size: int, crop: bool = True, use_clahe: bool = True,
                     clahe_params: ClaheParams | None = None, crop_threshold: int = 10) -> np.ndarray:
    """Crop, resize to ``size`` and equalize; the offline pipeline applied to every image."""
    if crop:
        img = circular_crop(img, crop_threshold)
    img = resize(img, size)
    if use_clahe:
        img = clahe(img, clahe_params)
    return img


# ------------------------------------------------------------------ splits


def split_counts(n: int, ratios) -> list[int]:
    cuts = [0] + [int(round(n * c)) for c in np.cumsum(ratios)]
    cuts[-1] = n
    return [b - a for a, b in zip(cuts, cuts[1:])]


def split_dataset(entries, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetManifest:
    """Stratified split: shuffle each grade with its own seeded stream, cut at cumulative ratios."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_grade: dict[int, list[str]] = {}
    for path, grade in entries:
        if int(grade) not in GRADES:
            raise ValueError(f"grade {grade} outside 0..4")
        by_grade.setdefault(int(grade), []).append(str(path))
    out = []
    for grade in sorted(by_grade):
        paths = sorted(by_grade[grade])
        if len(paths) < len(SPLITS):
            raise ValueError(f"grade {grade} has {len(paths)} entries; need at least {len(SPLITS)}")
        order = np.random.default_rng([seed, grade]).permutation(len(paths))
        start = 0
        for name, count in zip(SPLITS, split_counts(len(paths), ratios)):
            out.extend(ManifestEntry(paths[i], grade, name) for i in order[start : start + count])
            start += count
    return DatasetManifest(out, seed, ratios)


def balance_indices(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices that oversample minority grades up to the majority count.

    Extra copies cycle through shuffled members of the grade, so each image is
    repeated ``ceil`` or ``floor`` of the needed multiplicity.
    """
    labels = np.asarray(labels)
    grades, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    out = []
    for g, n in zip(grades, counts):
        members = np.flatnonzero(labels == g)
        reps, extra = divmod(int(target), int(n))
        out.append(np.tile(members, reps))
        out.append(rng.permutation(members)[:extra])
    return np.sort(np.concatenate(out))


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings so reruns give identical bytes
    Image.fromarray(img).save(path, format="PNG", optimize=False, compress_level=6)
