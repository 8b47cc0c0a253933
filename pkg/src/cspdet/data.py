"""Synthetic scenes with exact ground truth, annotation/image I/O and augmentation.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import ObjectAnnotation, clip_box, iou

logger = logging.getLogger(__name__)

BACKGROUNDS = ("flat", "gradient", "noise")
FILL_STYLES = ("rect", "ellipse", "mixed")


@dataclass
class SceneSpec:
    image_w: int = 64
    image_h: int = 64
    objects_min: int = 1
    objects_max: int = 4
    height_range: tuple = (16.0, 44.0)
    aspect_mode: str = "fixed"
    aspect_ratio: float = 0.41
    aspect_range: tuple = (0.5, 2.0)
    overlap_max: float = 0.2
    background: str = "gradient"
    noise_sigma: float = 0.02
    fill_style: str = "mixed"
    min_contrast: float = 0.35
    max_tries: int = 200
    seed: int = 0

    def __post_init__(self):
        self.height_range = tuple(float(v) for v in self.height_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError(f"need 0 <= objects_min <= objects_max, got "
                             f"{self.objects_min}, {self.objects_max}")
        lo, hi = self.height_range
        if not 0 < lo <= hi <= self.image_h:
            raise ValueError(f"height_range {self.height_range} must satisfy 0 < lo <= hi <= image_h")
        if self.aspect_mode not in ("fixed", "range"):
            raise ValueError(f"aspect_mode must be 'fixed' or 'range', got {self.aspect_mode!r}")
        if not 0 < self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError(f"invalid aspect_range {self.aspect_range}")
        if not 0 <= self.overlap_max < 1:
            raise ValueError(f"overlap_max must lie in [0, 1), got {self.overlap_max}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.fill_style not in FILL_STYLES:
            raise ValueError(f"fill_style must be one of {FILL_STYLES}")


@dataclass
class DatasetRecord:
    width: int
    height: int
    annotations: list
    image: Optional[np.ndarray] = field(default=None, repr=False)
    image_path: Optional[str] = None

    def __post_init__(self):
        for k, a in enumerate(self.annotations):
            if not (0 <= a.cx < self.width and 0 <= a.cy < self.height):
                raise ValueError(f"annotation {k} center ({a.cx}, {a.cy}) outside "
                                 f"{self.width}x{self.height} image")


@dataclass
class AugmentParams:
    hflip_prob: float = 0.5
    scale_range: tuple = (0.8, 1.25)
    crop_size: Optional[tuple] = None
    brightness_jitter: float = 0.1
    pad_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.crop_size is not None:
            self.crop_size = tuple(int(v) for v in self.crop_size)
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError(f"invalid scale_range {self.scale_range}")


# --- rendering ----------------------------------------------------------------

def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    px = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(px + 1, hi) - np.maximum(px, lo), 0.0, 1.0)


def _rect_coverage(obj: ObjectAnnotation, w: int, h: int) -> np.ndarray:
    b = obj.box
    return np.outer(_coverage_1d(b.y1, b.y2, h), _coverage_1d(b.x1, b.x2, w))


def _ellipse_coverage(obj: ObjectAnnotation, w: int, h: int, ss: int = 4) -> np.ndarray:
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    inside = (((xs[None, :] - obj.cx) / (obj.w / 2)) ** 2
              + ((ys[:, None] - obj.cy) / (obj.h / 2)) ** 2) <= 1.0
    return inside.reshape(h, ss, w, ss).mean(axis=(1, 3))


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.image_w, spec.image_h
    c0 = rng.uniform(0.1, 0.9, size=3)
    if spec.background == "flat":
        img = np.broadcast_to(c0, (h, w, 3)).copy()
    else:
        c1 = np.clip(c0 + rng.uniform(-0.25, 0.25, size=3), 0, 1)
        theta = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        t = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        img = c0 + t[..., None] * (c1 - c0)
    if spec.background == "noise" or spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _pick_color(bg_mean: np.ndarray, used: list, spec: SceneSpec, rng) -> np.ndarray:
    best, best_d = None, -1.0
    for _ in range(50):
        c = rng.uniform(0.0, 1.0, size=3)
        d = min([np.linalg.norm(c - bg_mean)] + [np.linalg.norm(c - u) for u in used])
        if d >= spec.min_contrast:
            return c
        if d > best_d:
            best, best_d = c, d
    return best


def _sample_object(spec: SceneSpec, rng) -> Optional[ObjectAnnotation]:
    h = rng.uniform(*spec.height_range)
    ar = spec.aspect_ratio if spec.aspect_mode == "fixed" else rng.uniform(*spec.aspect_range)
    w = ar * h
    if w > spec.image_w:
        return None
    cx = rng.uniform(w / 2, spec.image_w - w / 2)
    cy = rng.uniform(h / 2, spec.image_h - h / 2)
    return ObjectAnnotation(float(cx), float(cy), float(h), float(w))


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> DatasetRecord:
    """Render one scene; annotations carry the exact analytic boxes."""
    n = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    placed: list[ObjectAnnotation] = []
    tries = 0
    while len(placed) < n and tries < spec.max_tries:
        tries += 1
        obj = _sample_object(spec, rng)
        if obj is None:
            continue
        if all(iou(obj.box, p.box) <= spec.overlap_max for p in placed):
            placed.append(obj)
    if len(placed) < n:
        warnings.warn(f"placed only {len(placed)} of {n} objects after {tries} tries", stacklevel=2)
    img = _background(spec, rng)
    bg_mean = img.reshape(-1, 3).mean(axis=0)
    used: list = []
    # larger objects first so small ones stay visible on top
    order = sorted(range(len(placed)), key=lambda k: -placed[k].area)
    for k in order:
        obj = placed[k]
        style = spec.fill_style
        if style == "mixed":
            style = "rect" if rng.random() < 0.5 else "ellipse"
        cov = (_rect_coverage if style == "rect" else _ellipse_coverage)(obj, spec.image_w, spec.image_h)
        color = _pick_color(bg_mean, used, spec, rng)
        used.append(color)
        img = img * (1 - cov[..., None]) + color * cov[..., None]
    return DatasetRecord(spec.image_w, spec.image_h, placed, image=img)


def generate_dataset(spec: SceneSpec, n: int, seed: Optional[int] = None) -> list[DatasetRecord]:
    """``n`` scenes; scene ``i`` uses its own generator seeded by ``(seed, i)``."""
    seed = spec.seed if seed is None else seed
    return [generate_scene(spec, np.random.default_rng([seed, i])) for i in range(n)]


def jitter_annotations(annotations: Sequence[ObjectAnnotation], radius: float,
                       rng: np.random.Generator, width: int, height: int) -> list[ObjectAnnotation]:
    """Shift every center by independent uniform offsets in [-radius, radius]."""
    if radius <= 0:
        return list(annotations)
    out = []
    for a in annotations:
        dx, dy = rng.uniform(-radius, radius, size=2)
        cx = float(np.clip(a.cx + dx, 0.0, np.nextafter(width, 0)))
        cy = float(np.clip(a.cy + dy, 0.0, np.nextafter(height, 0)))
        out.append(replace(a, cx=cx, cy=cy))
    return out


# --- image I/O ----------------------------------------------------------------

def _read_netpbm_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ValueError(f"expected {magic.decode()} netpbm data, got {data[:2]!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError("truncated netpbm header")
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ValueError("truncated netpbm header")
            pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise ValueError(f"bad netpbm header token {data[start:pos][:20]!r}") from None
    return tokens, pos + 1


def _to_bytes(img: np.ndarray) -> bytes:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + _to_bytes(image))


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), pos = _read_netpbm_header(data, b"P6")
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    raw = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {image.shape}")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(image))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, _), pos = _read_netpbm_header(data, b"P5")
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# --- annotation I/O -----------------------------------------------------------

def record_to_json(rec: DatasetRecord) -> dict:
    return {"image": rec.image_path or "", "width": rec.width, "height": rec.height,
            "objects": [a.to_dict() for a in rec.annotations]}


def save_annotations(records: Sequence[DatasetRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec)) + "\n")


def _parse_record(obj: dict, index: int) -> DatasetRecord:
    try:
        width, height = int(obj["width"]), int(obj["height"])
        raw = obj["objects"]
        image = obj["image"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"record {index}: missing or invalid field ({exc})") from None
    anns = []
    for k, o in enumerate(raw):
        try:
            anns.append(ObjectAnnotation(float(o["cx"]), float(o["cy"]), float(o["h"]),
                                         float(o["w"]), bool(o.get("ignore", False))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"record {index}, object {k}: {exc}") from None
        b = anns[-1].box
        tol = 1e-9
        if b.x1 < -tol or b.y1 < -tol or b.x2 > width + tol or b.y2 > height + tol:
            raise ValueError(f"record {index}, object {k}: box {b.as_tuple()} extends outside "
                             f"the {width}x{height} image")
    try:
        return DatasetRecord(width, height, anns, image_path=str(image))
    except ValueError as exc:
        raise ValueError(f"record {index}: {exc}") from None


def load_annotations(path) -> list[DatasetRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            records.append(_parse_record(obj, len(records)))
    return records


def resolve_image_path(record: DatasetRecord, base_dir) -> Path:
    p = Path(record.image_path)
    return p if p.is_absolute() else Path(base_dir) / p


def load_record_image(record: DatasetRecord, base_dir=".") -> np.ndarray:
    if record.image is not None:
        return record.image
    img = read_ppm(resolve_image_path(record, base_dir))
    if img.shape[:2] != (record.height, record.width):
        raise ValueError(f"{record.image_path}: image is {img.shape[1]}x{img.shape[0]}, record "
                         f"says {record.width}x{record.height}")
    return img


def write_dataset(records: Sequence[DatasetRecord], out_dir, name: str = "annotations.jsonl",
                  prefix: str = "img") -> Path:
    """Write every record's image as PPM next to a JSONL annotation file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stored = []
    for i, rec in enumerate(records):
        fname = f"{prefix}_{i:05d}.ppm"
        write_ppm(out_dir / fname, rec.image)
        stored.append(replace(rec, image_path=fname))
    save_annotations(stored, out_dir / name)
    return out_dir / name


# --- augmentation -------------------------------------------------------------

def hflip(image: np.ndarray, annotations: Sequence[ObjectAnnotation]):
    w = image.shape[1]
    return image[:, ::-1].copy(), [replace(a, cx=w - a.cx) for a in annotations]


def scale_and_crop(image: np.ndarray, annotations: Sequence[ObjectAnnotation], scale: float,
                   ox: float, oy: float, crop_w: int, crop_h: int, pad_value: float = 0.0):
    """Bilinear rescale by ``scale`` then take the ``crop_w x crop_h`` window at (ox, oy).

    Annotations survive iff their rescaled center lies inside the window;
    survivors are clipped to it and re-derived from the clipped box.
    """
    h, w = image.shape[:2]
    if scale == 1.0 and float(ox).is_integer() and float(oy).is_integer() \
            and 0 <= ox and 0 <= oy and ox + crop_w <= w and oy + crop_h <= h:
        out = image[int(oy):int(oy) + crop_h, int(ox):int(ox) + crop_w].copy()
    else:
        vv, uu = np.mgrid[0:crop_h, 0:crop_w].astype(np.float64)
        sy = (vv + oy + 0.5) / scale - 0.5
        sx = (uu + ox + 0.5) / scale - 0.5
        out = np.stack([ndimage.map_coordinates(image[..., c], [sy, sx], order=1, mode="nearest")
                        for c in range(image.shape[2])], axis=-1)
        inside = (sy >= -0.5) & (sy <= h - 0.5) & (sx >= -0.5) & (sx <= w - 0.5)
        out = np.where(inside[..., None], out, pad_value)
    anns = []
    for a in annotations:
        cx, cy = a.cx * scale - ox, a.cy * scale - oy
        if not (0 <= cx < crop_w and 0 <= cy < crop_h):
            continue
        moved = ObjectAnnotation(cx, cy, a.h * scale, a.w * scale, a.ignore)
        box = clip_box(moved.box, crop_w, crop_h)
        if box is None:
            continue
        if box is moved.box or box.as_tuple() == moved.box.as_tuple():
            anns.append(moved)
        else:
            clipped = ObjectAnnotation.from_box(box, a.ignore)
            if 0 <= clipped.cx < crop_w and 0 <= clipped.cy < crop_h:
                anns.append(clipped)
    return out, anns


def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(image + delta, 0.0, 1.0)


def augment(record: DatasetRecord, params: AugmentParams, rng: np.random.Generator):
    """Random flip, rescale, crop and brightness shift; returns ``(image, annotations)``."""
    image = record.image
    if image is None:
        raise ValueError("augment needs a record with its image loaded")
    anns = list(record.annotations)
    if rng.random() < params.hflip_prob:
        image, anns = hflip(image, anns)
    h, w = image.shape[:2]
    s = float(rng.uniform(*params.scale_range))
    cw, ch = params.crop_size or (w, h)
    sw, sh = w * s, h * s

    def _offset(full, crop):
        span = full - crop
        if span >= 0:
            return float(rng.integers(0, int(math.floor(span)) + 1))
        return float(-rng.integers(0, int(math.ceil(-span)) + 1))

    ox, oy = _offset(sw, cw), _offset(sh, ch)
    image, anns = scale_and_crop(image, anns, s, ox, oy, cw, ch, params.pad_value)
    if params.brightness_jitter > 0:
        image = adjust_brightness(image, float(rng.uniform(-params.brightness_jitter,
                                                           params.brightness_jitter)))
    return image, anns
