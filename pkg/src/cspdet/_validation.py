"""Input checking shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import ObjectAnnotation


def check_image(image, name: str = "image") -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = img.astype(np.float64, copy=False)
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def check_images(X) -> list[np.ndarray]:
    """Accept an (N, H, W, 3) array or a sequence of (H, W, 3) images."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        return [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError("X must be a batch of images; wrap a single image in a list")
    images = [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if not images:
        raise ValueError("X is empty")
    return images


def _as_annotation(a) -> ObjectAnnotation:
    if isinstance(a, ObjectAnnotation):
        return a
    if isinstance(a, dict):
        return ObjectAnnotation(float(a["cx"]), float(a["cy"]), float(a["h"]), float(a["w"]),
                                bool(a.get("ignore", False)))
    raise TypeError(f"cannot interpret {type(a).__name__} as an annotation")


def check_annotations(y, images: Sequence[np.ndarray]) -> list[list[ObjectAnnotation]]:
    if y is None:
        raise ValueError("y (per-image annotation lists) is required")
    y = list(y)
    if len(y) != len(images):
        raise ValueError(f"got {len(images)} images but {len(y)} annotation lists")
    out = []
    for i, (anns, img) in enumerate(zip(y, images)):
        h, w = img.shape[:2]
        conv = [_as_annotation(a) for a in anns]
        for k, a in enumerate(conv):
            if not (0 <= a.cx < w and 0 <= a.cy < h):
                raise ValueError(f"y[{i}][{k}]: center ({a.cx}, {a.cy}) outside {w}x{h} image")
        out.append(conv)
    return out


def symmetric_padding(h: int, w: int, multiple: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) padding bringing h and w to a multiple."""
    ph, pw = (-h) % multiple, (-w) % multiple
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
