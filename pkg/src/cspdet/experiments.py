"""Ablation sweeps and the center-disturbance robustness study.

Every run trains one ``CSPDetector`` from a ``RunConfig`` with a nested
override, evaluates it on the held-out scenes and returns flat metric rows
keyed by a setting label.  Runs execute sequentially for reproducibility.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import generate_dataset, load_annotations, load_record_image
from .evaluation import center_errors, evaluate

logger = logging.getLogger(__name__)

IOUS = (0.5, 0.75)
STAGE_SUBSETS = ((3,), (4,), (5,), (3, 4), (4, 5), (3, 4, 5), (2, 3, 4, 5))


def _both(key, value):
    return {"model": {key: value}, "codec": {key: value}}


AXES = {
    "scale_mode": [(m, _both("scale_mode", m)) for m in ("height", "width", "height_width")],
    "r": [(f"r={r}", _both("r", r)) for r in (2, 4, 8, 16)],
    "offset": [(f"offset={'on' if v else 'off'}", _both("offset_enabled", v)) for v in (True, False)],
    "stages": [("stages=" + "+".join(map(str, s)), {"model": {"stages_fused": list(s)}})
               for s in STAGE_SUBSETS],
}


@dataclass
class Datasets:
    train_images: list
    train_annotations: list
    val_images: list
    val_annotations: list


def load_datasets(cfg: RunConfig) -> Datasets:
    """Training set from the annotation file if given, else synthetic; synthetic validation set."""
    spec = cfg.scene_spec()
    ann_path = cfg.annotations_path()
    if ann_path is not None:
        recs = load_annotations(ann_path)
        tr_x = [load_record_image(r, ann_path.parent) for r in recs]
        tr_y = [r.annotations for r in recs]
    else:
        recs = generate_dataset(spec, cfg.data["n_train"])
        tr_x, tr_y = [r.image for r in recs], [r.annotations for r in recs]
    val = generate_dataset(spec, cfg.data["val"]["n"], seed=cfg.data["val"]["seed"])
    return Datasets(tr_x, tr_y, [r.image for r in val], [r.annotations for r in val])


def metric_rows(setting: str, dets, gts, ious: Sequence[float] = IOUS) -> list[dict]:
    errs = center_errors(dets, gts, 0.5)
    rows = []
    for t in ious:
        m = evaluate(dets, gts, t)
        rows.append({"setting": setting, "iou_thresh": t, "mr2": m["mr2"], "ap": m["ap"],
                     "n_images": m["n_images"], "n_gt": m["n_gt"],
                     "center_error": float(errs.mean()) if errs.size else float("nan")})
    return rows


def train_and_evaluate(cfg: RunConfig, setting: str = "base", data: Optional[Datasets] = None,
                       ious: Sequence[float] = IOUS, **est_overrides):
    """Fit one model on ``cfg``; returns ``(estimator, rows)``."""
    data = data or load_datasets(cfg)
    est = cfg.make_estimator(**est_overrides)
    est.fit(data.train_images, data.train_annotations)
    dets = est.predict(data.val_images)
    return est, metric_rows(setting, dets, data.val_annotations, ious)


def run_ablation(cfg: RunConfig, axis: str, values: Optional[Sequence] = None,
                 data: Optional[Datasets] = None) -> list[dict]:
    """One training run per axis value; ``values`` restricts the sweep to those labels."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    data = data or load_datasets(cfg)
    rows = []
    for label, override in AXES[axis]:
        if values is not None and label not in values:
            continue
        logger.info("ablation %s: %s", axis, label)
        _, r = train_and_evaluate(cfg.replace(override), label, data)
        rows += r
    return rows


def center_disturbance_experiment(cfg: RunConfig, radii: Sequence[float] = (0, 4, 8),
                                  seeds: Sequence[int] = (0,),
                                  data: Optional[Datasets] = None) -> list[dict]:
    """Train with annotation centers jittered uniformly within each radius (pixels)."""
    data = data or load_datasets(cfg)
    rows = []
    for radius in radii:
        for seed in seeds:
            run = cfg.replace({"seed": int(seed), "data": {"center_jitter": float(radius)}})
            _, r = train_and_evaluate(run, f"jitter={radius:g}", data)
            for row in r:
                row["seed"] = int(seed)
            rows += r
    return rows


def summarize(rows: Sequence[dict], metric: str, iou: float) -> dict:
    """Mean of ``metric`` per setting at one IoU, in first-seen setting order."""
    out: dict = {}
    for row in rows:
        if row["iou_thresh"] == iou:
            out.setdefault(row["setting"], []).append(row[metric])
    return {k: float(np.mean(v)) for k, v in out.items()}


METRIC_FIELDS = ["setting", "iou_thresh", "mr2", "ap", "n_images", "n_gt"]


def write_rows(rows: Sequence[dict], path, fields: Optional[Sequence[str]] = None) -> None:
    fields = list(fields or METRIC_FIELDS)
    for row in rows:
        fields += [k for k in row if k not in fields]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
