"""Greedy IoU matching, log-average miss rate over FPPI and average precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Detection, ObjectAnnotation, boxes_to_array, iou_matrix, stable_score_order

FPPI_POINTS = np.logspace(-2.0, 0.0, 9)
MISS_RATE_FLOOR = 1e-6

TP, FP, IGNORED = 1, 0, -1


@dataclass
class MatchResult:
    """Per-detection labels (TP / FP / IGNORED) in score order, plus counts."""

    scores: np.ndarray
    labels: np.ndarray
    gt_matched: np.ndarray
    n_gt: int

    @property
    def n_tp(self) -> int:
        return int(np.sum(self.labels == TP))

    @property
    def n_fp(self) -> int:
        return int(np.sum(self.labels == FP))


@dataclass
class FppiCurve:
    fppi: np.ndarray
    miss_rate: np.ndarray
    reference_fppi: np.ndarray
    reference_miss_rate: np.ndarray
    mr2: float


def match_detections(dets: Sequence[Detection], gts: Sequence[ObjectAnnotation],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching against one image's ground truth.

    A detection takes the unmatched, non-ignored GT with highest IoU at or above
    ``iou_thresh``.  A detection that fails but overlaps an ignored GT at that
    threshold is labelled IGNORED rather than FP.
    """
    order = stable_score_order([d.score for d in dets])
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    labels = np.full(len(order), FP, dtype=np.int64)
    care = [g for g in gts if not g.ignore]
    ign = [g for g in gts if g.ignore]
    matched = np.zeros(len(care), dtype=bool)
    if not order.size:
        return MatchResult(scores, labels, matched, len(care))
    dboxes = boxes_to_array([dets[i].box for i in order])
    ious = iou_matrix(dboxes, boxes_to_array([g.box for g in care]))
    ious_ign = iou_matrix(dboxes, boxes_to_array([g.box for g in ign]))
    for k in range(len(order)):
        if care:
            cand = np.where(matched, -1.0, ious[k])
            best = int(np.argmax(cand))
            if cand[best] >= iou_thresh:
                matched[best] = True
                labels[k] = TP
                continue
        if ign and np.max(ious_ign[k]) >= iou_thresh:
            labels[k] = IGNORED
    return MatchResult(scores, labels, matched, len(care))


def _pooled(results: Sequence[MatchResult]):
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    labels = np.concatenate([r.labels for r in results]) if results else np.zeros(0, dtype=np.int64)
    keep = labels != IGNORED
    scores, labels = scores[keep], labels[keep]
    order = stable_score_order(scores)
    return scores[order], labels[order], sum(r.n_gt for r in results)


def _cut_points(sorted_scores: np.ndarray) -> np.ndarray:
    """Mask of valid thresholds: only the last of each run of equal scores."""
    last = np.ones(len(sorted_scores), dtype=bool)
    last[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    return last


def miss_rate_curve(results: Sequence[MatchResult]):
    """(fppi, miss_rate) at every distinct score threshold, starting from 'no detections'."""
    if not results:
        raise ValueError("need at least one image")
    scores, labels, n_gt = _pooled(results)
    if n_gt == 0:
        raise ValueError("miss rate is undefined without ground truth")
    tp = np.cumsum(labels == TP)
    fp = np.cumsum(labels == FP)
    last = _cut_points(scores)
    fppi = np.concatenate([[0.0], fp[last] / len(results)])
    mr = np.concatenate([[1.0], 1.0 - tp[last] / n_gt])
    return fppi, mr


def log_average_miss_rate(results: Sequence[MatchResult],
                          reference: np.ndarray = FPPI_POINTS) -> FppiCurve:
    """Geometric mean of the miss rate sampled at log-spaced FPPI reference points.

    At each reference the lowest miss rate reachable with FPPI <= reference is taken.
    """
    fppi, mr = miss_rate_curve(results)
    ref_mr = np.array([mr[fppi <= f].min() for f in reference])
    mr2 = float(np.exp(np.mean(np.log(np.maximum(ref_mr, MISS_RATE_FLOOR)))))
    return FppiCurve(fppi, mr, np.asarray(reference), ref_mr, mr2)


def precision_recall(results: Sequence[MatchResult]):
    scores, labels, n_gt = _pooled(results)
    if n_gt == 0:
        raise ValueError("precision/recall is undefined without ground truth")
    tp = np.cumsum(labels == TP)
    fp = np.cumsum(labels == FP)
    last = _cut_points(scores)
    tp, fp = tp[last], fp[last]
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision(results: Sequence[MatchResult]) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    precision, recall = precision_recall(results)
    if precision.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(per_image_dets: Sequence[Sequence[Detection]],
             per_image_gts: Sequence[Sequence[ObjectAnnotation]], iou_thresh: float = 0.5) -> dict:
    """MR-2, AP and the curves for one IoU threshold over a set of images."""
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError(f"{len(per_image_dets)} detection lists for {len(per_image_gts)} images")
    results = [match_detections(d, g, iou_thresh) for d, g in zip(per_image_dets, per_image_gts)]
    curve = log_average_miss_rate(results)
    precision, recall = precision_recall(results)
    return {
        "iou_thresh": iou_thresh,
        "mr2": curve.mr2,
        "ap": average_precision(results),
        "n_images": len(results),
        "n_gt": sum(r.n_gt for r in results),
        "curve": curve,
        "precision": precision,
        "recall": recall,
    }


def center_errors(per_image_dets: Sequence[Sequence[Detection]],
                  per_image_gts: Sequence[Sequence[ObjectAnnotation]],
                  iou_thresh: float = 0.5) -> np.ndarray:
    """Euclidean center distance (pixels) of every TP at ``iou_thresh`` to its GT."""
    errs = []
    for dets, gts in zip(per_image_dets, per_image_gts):
        care = [g for g in gts if not g.ignore]
        order = stable_score_order([d.score for d in dets])
        matched = np.zeros(len(care), dtype=bool)
        if not care or not len(order):
            continue
        ious = iou_matrix(boxes_to_array([dets[i].box for i in order]),
                          boxes_to_array([g.box for g in care]))
        for k, i in enumerate(order):
            cand = np.where(matched, -1.0, ious[k])
            best = int(np.argmax(cand))
            if cand[best] >= iou_thresh:
                matched[best] = True
                cx, cy = dets[i].box.center
                errs.append(np.hypot(cx - care[best].cx, cy - care[best].cy))
    return np.array(errs)
