"""Loading manifest splits into image arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import ClaheParams, DatasetManifest, preprocess_image, read_image


@dataclass
class PreprocessOptions:
    crop: bool = True
    clahe: bool = True
    crop_threshold: int = 10


def load_split(manifest: DatasetManifest, split: str, size: int, opts: PreprocessOptions | None = None,
               clahe_params: ClaheParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read, crop, resize and equalize every image of a split.

    Returns ``(images uint8 (N, size, size, 3), labels int64 (N,))`` in
    manifest order.
    """
    opts = opts or PreprocessOptions()
    entries = manifest.split(split)
    images = np.empty((len(entries), size, size, 3), dtype=np.uint8)
    for i, e in enumerate(entries):
        img = read_image(manifest.resolve(e))
        images[i] = preprocess_image(img, size, opts.crop, opts.clahe, clahe_params, opts.crop_threshold)
    return images, np.array([e.grade for e in entries], dtype=np.int64)
