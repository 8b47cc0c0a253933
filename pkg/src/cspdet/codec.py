"""Encode annotations into center / scale / offset supervision and decode back.

Map arrays are indexed ``[row, col]`` = ``[y, x]``; a cell ``(i, j)`` in the
public API means column ``i``, row ``j``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import AspectPolicy, Detection, ObjectAnnotation, box_from_center_scale, clip_box, nms

SCALE_MODES = ("height", "width", "height_width")
# only "center" is implemented; the vertex names are reserved
POINT_MODES = ("center", "top", "bottom")


@dataclass
class CodecConfig:
    r: int = 4
    scale_mode: str = "height"
    neighbor_radius: int = 2
    sigma_ratio: float = 1.0 / 6.0
    offset_enabled: bool = True
    decode_threshold: float = 0.01
    scale_on_neighbors: bool = True
    point: str = "center"

    def __post_init__(self):
        if self.r not in (2, 4, 8, 16):
            raise ValueError(f"r must be one of 2, 4, 8, 16, got {self.r}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.point not in POINT_MODES:
            raise ValueError(f"point must be one of {POINT_MODES}, got {self.point!r}")
        if self.point != "center":
            raise NotImplementedError(f"point mode {self.point!r} is reserved but not implemented")
        if not self.sigma_ratio > 0:
            raise ValueError(f"sigma_ratio must be positive, got {self.sigma_ratio}")
        if self.neighbor_radius < 0:
            raise ValueError(f"neighbor_radius must be >= 0, got {self.neighbor_radius}")

    @property
    def scale_channels(self) -> int:
        return 2 if self.scale_mode == "height_width" else 1

    def map_size(self, image_w: int, image_h: int) -> tuple[int, int]:
        return math.ceil(image_w / self.r), math.ceil(image_h / self.r)


@dataclass
class TargetMaps:
    center: np.ndarray
    scale: np.ndarray
    scale_weight: np.ndarray
    offset: np.ndarray
    offset_weight: np.ndarray
    gauss: np.ndarray
    r: int
    planes: tuple = field(default=("center", "scale", "scale_weight", "offset",
                                   "offset_weight", "gauss"), repr=False)

    @property
    def num_positives(self) -> int:
        return int(self.center.sum())


def _scale_values(obj: ObjectAnnotation, scale_mode: str) -> tuple[float, ...]:
    if scale_mode == "height":
        return (math.log(obj.h),)
    if scale_mode == "width":
        return (math.log(obj.w),)
    return (math.log(obj.h), math.log(obj.w))


def _cell_of(obj: ObjectAnnotation, r: int) -> tuple[int, int]:
    return int(math.floor(obj.cx / r)), int(math.floor(obj.cy / r))


def _priority(obj: ObjectAnnotation, dist: int) -> tuple:
    # smaller wins: nearest center, then larger area, then a total order on geometry
    return (dist, -obj.area, obj.cy, obj.cx, obj.h, obj.w)


def _check_inside(annotations: Sequence[ObjectAnnotation], image_w: int, image_h: int):
    for k, obj in enumerate(annotations):
        if not (0 <= obj.cx < image_w and 0 <= obj.cy < image_h):
            raise ValueError(
                f"annotation {k} center ({obj.cx}, {obj.cy}) lies outside the "
                f"{image_w}x{image_h} image"
            )


def gaussian_mask(annotations: Sequence[ObjectAnnotation], map_w: int, map_h: int,
                  cfg: CodecConfig) -> np.ndarray:
    """Elementwise max over objects of an axis-aligned Gaussian at each object's cell.

    Standard deviations are ``sigma_ratio * w / r`` (columns) and
    ``sigma_ratio * h / r`` (rows).
    """
    m = np.zeros((map_h, map_w))
    if not annotations:
        return m
    cols = np.arange(map_w, dtype=np.float64)
    rows = np.arange(map_h, dtype=np.float64)
    for obj in annotations:
        ci, cj = _cell_of(obj, cfg.r)
        sw = cfg.sigma_ratio * obj.w / cfg.r
        sh = cfg.sigma_ratio * obj.h / cfg.r
        gx = np.exp(-((cols - ci) ** 2) / (2 * sw * sw))
        gy = np.exp(-((rows - cj) ** 2) / (2 * sh * sh))
        np.maximum(m, gy[:, None] * gx[None, :], out=m)
    return m


def encode_targets(annotations: Sequence[ObjectAnnotation], image_w: int, image_h: int,
                   cfg: CodecConfig) -> TargetMaps:
    """Build the supervision maps for one image.

    Ignored objects get no positives or regression targets but still feed
    the Gaussian mask, so nearby negatives are down-weighted.
    """
    _check_inside(annotations, image_w, image_h)
    mw, mh = cfg.map_size(image_w, image_h)
    cs = cfg.scale_channels
    center = np.zeros((mh, mw))
    scale = np.zeros((cs, mh, mw))
    scale_weight = np.zeros((cs, mh, mw))
    offset = np.zeros((2, mh, mw))
    offset_weight = np.zeros((mh, mw))

    active = [a for a in annotations if not a.ignore]
    owner: dict[tuple[int, int], tuple] = {}
    positive: dict[tuple[int, int], tuple] = {}
    for idx, obj in enumerate(active):
        ci, cj = _cell_of(obj, cfg.r)
        key = _priority(obj, 0)
        if (ci, cj) in positive:
            warnings.warn(
                f"two objects share map cell ({ci}, {cj}); keeping the larger one",
                stacklevel=2,
            )
            if key >= positive[(ci, cj)][0]:
                continue
        positive[(ci, cj)] = (key, idx)
        rad = cfg.neighbor_radius if cfg.scale_on_neighbors else 0
        for j in range(max(cj - rad, 0), min(cj + rad, mh - 1) + 1):
            for i in range(max(ci - rad, 0), min(ci + rad, mw - 1) + 1):
                k = _priority(obj, max(abs(i - ci), abs(j - cj)))
                if (i, j) not in owner or k < owner[(i, j)][0]:
                    owner[(i, j)] = (k, idx)

    for (i, j), (_, idx) in owner.items():
        scale[:, j, i] = _scale_values(active[idx], cfg.scale_mode)
        scale_weight[:, j, i] = 1.0
    for (i, j), (_, idx) in positive.items():
        obj = active[idx]
        center[j, i] = 1.0
        offset[0, j, i] = obj.cx / cfg.r - i
        offset[1, j, i] = obj.cy / cfg.r - j
        offset_weight[j, i] = 1.0

    gauss = gaussian_mask(annotations, mw, mh, cfg)
    return TargetMaps(center, scale, scale_weight, offset, offset_weight, gauss, cfg.r)


def stack_targets(maps: Sequence[TargetMaps]) -> TargetMaps:
    """Stack per-image maps along a new leading batch axis."""
    first = maps[0]
    return TargetMaps(*(np.stack([getattr(m, p) for m in maps]) for p in first.planes), r=first.r)


def _policy_for(scale_mode: str, policy: Optional[AspectPolicy]) -> AspectPolicy:
    if scale_mode == "height_width":
        return AspectPolicy("free")
    policy = policy or AspectPolicy()
    if policy.mode != "fixed":
        raise ValueError(f"scale_mode {scale_mode!r} predicts one side and needs a fixed aspect policy")
    return policy


def decode_detections(center_heat: np.ndarray, scale_map: np.ndarray,
                      offset_map: Optional[np.ndarray], image_w: int, image_h: int,
                      cfg: CodecConfig, policy: Optional[AspectPolicy] = None,
                      nms_thresh: Optional[float] = 0.5) -> list[Detection]:
    """Turn one image's predicted maps into score-sorted detections.

    Pass ``nms_thresh=None`` to get every above-threshold cell unsuppressed.
    """
    center_heat = np.asarray(center_heat, dtype=np.float64)
    scale_map = np.asarray(scale_map, dtype=np.float64)
    if scale_map.ndim == 2:
        scale_map = scale_map[None]
    if center_heat.ndim != 2 or scale_map.shape[1:] != center_heat.shape:
        raise ValueError(f"map shapes disagree: heat {center_heat.shape}, scale {scale_map.shape}")
    if scale_map.shape[0] != cfg.scale_channels:
        raise ValueError(f"scale map has {scale_map.shape[0]} channels, "
                         f"scale_mode {cfg.scale_mode!r} needs {cfg.scale_channels}")
    use_offset = cfg.offset_enabled and offset_map is not None
    maps = [center_heat, scale_map]
    if use_offset:
        offset_map = np.asarray(offset_map, dtype=np.float64)
        if offset_map.shape != (2,) + center_heat.shape:
            raise ValueError(f"offset map shape {offset_map.shape} != {(2,) + center_heat.shape}")
        maps.append(offset_map)
    if not all(np.all(np.isfinite(m)) for m in maps):
        raise ValueError("non-finite values in predicted maps")
    policy = _policy_for(cfg.scale_mode, policy)

    r = cfg.r
    rows, cols = np.nonzero((center_heat >= cfg.decode_threshold) & (center_heat > 0))
    dets = []
    for j, i in zip(rows.tolist(), cols.tolist()):
        if use_offset:
            cx, cy = (i + offset_map[0, j, i]) * r, (j + offset_map[1, j, i]) * r
        else:
            cx, cy = (i + 0.5) * r, (j + 0.5) * r
        s = scale_map[:, j, i]
        if cfg.scale_mode == "height":
            h, w = math.exp(s[0]), None
        elif cfg.scale_mode == "width":
            w = math.exp(s[0])
            h = w / policy.ar
        else:
            h, w = math.exp(s[0]), math.exp(s[1])
        box = clip_box(box_from_center_scale(cx, cy, h, w, policy), image_w, image_h)
        if box is not None:
            dets.append(Detection(box, min(float(center_heat[j, i]), 1.0), (i, j)))
    if nms_thresh is None:
        order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
        return [dets[k] for k in order]
    return nms(dets, nms_thresh)


class TargetEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer from annotation lists to batched ``TargetMaps``."""

    def __init__(self, image_size=(64, 64), r=4, scale_mode="height", neighbor_radius=2,
                 sigma_ratio=1.0 / 6.0, scale_on_neighbors=True):
        self.image_size = image_size
        self.r = r
        self.scale_mode = scale_mode
        self.neighbor_radius = neighbor_radius
        self.sigma_ratio = sigma_ratio
        self.scale_on_neighbors = scale_on_neighbors

    def _config(self) -> CodecConfig:
        return CodecConfig(r=self.r, scale_mode=self.scale_mode,
                           neighbor_radius=self.neighbor_radius, sigma_ratio=self.sigma_ratio,
                           scale_on_neighbors=self.scale_on_neighbors)

    def fit(self, X, y=None):
        self._config()
        return self

    def transform(self, X) -> TargetMaps:
        cfg = self._config()
        w, h = self.image_size
        return stack_targets([encode_targets(anns, w, h, cfg) for anns in X])
