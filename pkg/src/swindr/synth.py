"""Synthetic fundus-like images with grade-dependent lesions.

A grade-``g`` image carries between ``2g-1`` and ``2g+1`` dark lesion blobs
(none for grade 0). Blob contrast and radius both grow with the grade, so
grades whose count ranges overlap still differ in lesion appearance. With
``corrupt=True`` a strong linear illumination ramp is multiplied in.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .preprocess import GRADES, DatasetManifest, split_dataset, write_image

FUNDUS_RGB = np.array([205.0, 105.0, 55.0])


@dataclass
class Blob:
    y: float
    x: float
    radius: float
    contrast: float


def blob_range(grade: int) -> tuple[int, int]:
    """Inclusive bounds on the lesion count for a grade."""
    if grade == 0:
        return 0, 0
    return 2 * grade - 1, 2 * grade + 1


def blob_contrast(grade: int) -> float:
    """Fractional darkening at a blob center."""
    return 0.2 + 0.18 * grade


def blob_radius(grade: int, size: int) -> float:
    """Lesion radius in pixels; lesions grow with the grade."""
    return max(1.5, 0.04 * size * (1.0 + 0.2 * (grade - 1)))


def _place_blobs(k, radius, grade, disc, optic, rng) -> list[Blob]:
    """Rejection-sample ``k`` non-overlapping lesions inside the disc, away from the optic disc.

    Dense layouts can paint themselves into a corner, so placement restarts
    from scratch after a bounded number of rejections, each time with a
    slightly smaller minimum spacing (this only matters for tiny images).
    """
    cy, cx, R = disc
    oy, ox, od_r = optic
    for restart in range(100):
        spacing = 2.4 * radius * 0.97**restart
        blobs: list[Blob] = []
        for _ in range(500):
            if len(blobs) == k:
                return blobs
            rr = R * 0.8 * np.sqrt(rng.uniform())
            th = rng.uniform(0, 2 * np.pi)
            by, bx = cy + rr * np.sin(th), cx + rr * np.cos(th)
            if np.hypot(by - oy, bx - ox) < od_r + 2.0 * radius:
                continue
            if any(np.hypot(by - b.y, bx - b.x) < spacing for b in blobs):
                continue
            c = blob_contrast(grade) * rng.uniform(0.92, 1.08)
            blobs.append(Blob(float(by), float(bx), float(radius), float(c)))
        if len(blobs) == k:
            return blobs
    raise RuntimeError("could not place lesions without overlap")


def render(grade: int, size: int, rng: np.random.Generator, corrupt: bool = False):
    """Return ``(rgb uint8 image, blobs)`` for one synthetic fundus."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2 + rng.uniform(-0.04, 0.04) * size
    cx = (size - 1) / 2 + rng.uniform(-0.04, 0.04) * size
    R = size * rng.uniform(0.40, 0.46)
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / R**2
    inside = r2 <= 1.0

    shade = 1.0 - 0.35 * r2
    tint = FUNDUS_RGB * rng.uniform(0.9, 1.1, size=3)

    # optic disc: bright patch on one side
    ang = rng.uniform(0, 2 * np.pi)
    oy, ox = cy + 0.55 * R * np.sin(ang), cx + 0.55 * R * np.cos(ang)
    od_r = 0.16 * R
    shade = shade + 0.45 * np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * od_r**2))

    lo, hi = blob_range(grade)
    k = int(rng.integers(lo, hi + 1))
    radius = blob_radius(grade, size)
    blobs = _place_blobs(k, radius, grade, (cy, cx, R), (oy, ox, od_r), rng)
    darken = np.zeros((size, size))
    for b in blobs:
        darken = np.maximum(darken, b.contrast * np.exp(-((yy - b.y) ** 2 + (xx - b.x) ** 2)
                                                        / (2 * (b.radius / 1.4) ** 2)))

    field = shade * (1.0 - darken)
    if corrupt:
        t = rng.uniform(0, 2 * np.pi)
        ramp = ((yy - cy) * np.sin(t) + (xx - cx) * np.cos(t)) / R
        field = field * np.clip(1.0 + rng.uniform(0.55, 0.75) * ramp, 0.15, None)
    img = field[..., None] * tint
    img = img + rng.normal(0.0, 2.0, size=img.shape)
    img = np.where(inside[..., None], img, 0.0)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), blobs


def gen_synthetic(root, n_per_class: int, image_size: int = 64, seed: int = 0, corrupt: bool = False,
                  ratios=(0.7, 0.15, 0.15)) -> DatasetManifest:
    """Render a 5-grade dataset to ``root/<split>/<grade>/<name>.png`` plus ``manifest.json``.

    Each image is drawn from its own stream seeded by ``(seed, grade, index)``,
    so output does not depend on generation order. ``synth_log.json`` records
    the lesions of every image.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    root = Path(root)
    names = [(f"g{g}_{i:05d}.png", g) for g in GRADES for i in range(n_per_class)]
    manifest = split_dataset(names, ratios, seed)
    log = {}
    entries = []
    for e in manifest.entries:
        idx = int(e.path.split("_")[1].split(".")[0])
        img, blobs = render(e.grade, image_size, np.random.default_rng([seed, e.grade, idx]), corrupt)
        rel = f"{e.split}/{e.grade}/{e.path}"
        write_image(root / rel, img)
        log[rel] = [asdict(b) for b in blobs]
        entries.append(type(e)(rel, e.grade, e.split))
    out = DatasetManifest(entries, seed, manifest.ratios, root=str(root))
    out.save(root / "manifest.json")
    (root / "synth_log.json").write_text(
        json.dumps({"seed": seed, "image_size": image_size, "corrupt": corrupt, "blobs": log}, indent=1) + "\n"
    )
    return out
