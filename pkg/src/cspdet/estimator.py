"""``CSPDetector``: the center-and-scale detector behind a scikit-learn estimator API."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import numerics as nx
from ._validation import check_annotations, check_images, symmetric_padding
from .codec import CodecConfig, decode_detections, encode_targets, stack_targets
from .data import AugmentParams, DatasetRecord, augment, jitter_annotations
from .evaluation import evaluate
from .geometry import AspectPolicy, BoundBox, Detection, nms
from .loss import LossConfig
from .network import ModelConfig, build_model, forward, train_step

logger = logging.getLogger(__name__)

# sub-streams of the per-run seed
_PERM, _AUG, _JITTER = 1, 2, 3


class CSPDetector(BaseEstimator):
    """Box-free detector predicting object centers and log scales on a dense grid.

    ``fit(X, y)`` takes equally sized (H, W, 3) images in [0, 1] and, per
    image, a list of ``ObjectAnnotation`` (or dicts with cx, cy, h, w).
    ``predict(X)`` returns one score-sorted list of ``Detection`` per image.
    Set ``warm_start=True`` to continue training from the current step up to
    ``n_iter``.

    Defaults are the desk-scale toy preset: 64x64 scenes with object heights
    16-44 px, hence ``scale_bias_init=3.3`` (log of the mid height) so the
    scale head starts near the data instead of at height 1.
    """

    def __init__(self, *, r=4, scale_mode="height", offset=True, aspect_ratio=0.41,
                 stage_channels=(24, 48, 96, 96), stages_fused=(3, 4, 5), head_channels=64,
                 dilate_last_stage=True, scale_bias_init=3.3, dtype="float32",
                 neighbor_radius=2, sigma_ratio=1.0 / 6.0, scale_on_neighbors=True,
                 gamma=2.0, beta=4.0, lambda_c=0.01, lambda_s=1.0, lambda_o=0.1,
                 smooth_l1_delta=1.0, learning_rate=1e-3, lr_schedule="constant", batch_size=8,
                 n_iter=3000, ema_decay=0.999, hflip_prob=0.5, scale_range=(0.8, 1.25), crop_size=None,
                 brightness_jitter=0.1, center_jitter=0.0, decode_threshold=0.01,
                 nms_threshold=0.5, use_ema=True, warm_start=False, random_state=0, verbose=0):
        self.r = r
        self.scale_mode = scale_mode
        self.offset = offset
        self.aspect_ratio = aspect_ratio
        self.stage_channels = stage_channels
        self.stages_fused = stages_fused
        self.head_channels = head_channels
        self.dilate_last_stage = dilate_last_stage
        self.scale_bias_init = scale_bias_init
        self.dtype = dtype
        self.neighbor_radius = neighbor_radius
        self.sigma_ratio = sigma_ratio
        self.scale_on_neighbors = scale_on_neighbors
        self.gamma = gamma
        self.beta = beta
        self.lambda_c = lambda_c
        self.lambda_s = lambda_s
        self.lambda_o = lambda_o
        self.smooth_l1_delta = smooth_l1_delta
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.ema_decay = ema_decay
        self.hflip_prob = hflip_prob
        self.scale_range = scale_range
        self.crop_size = crop_size
        self.brightness_jitter = brightness_jitter
        self.center_jitter = center_jitter
        self.decode_threshold = decode_threshold
        self.nms_threshold = nms_threshold
        self.use_ema = use_ema
        self.warm_start = warm_start
        self.random_state = random_state
        self.verbose = verbose

    # --- configuration views ---------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(stage_channels=tuple(self.stage_channels),
                           stages_fused=tuple(self.stages_fused), r=self.r,
                           head_channels=self.head_channels, offset_enabled=self.offset,
                           scale_mode=self.scale_mode, dilate_last_stage=self.dilate_last_stage,
                           scale_bias_init=self.scale_bias_init, dtype=self.dtype,
                           seed=self.random_state)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(r=self.r, scale_mode=self.scale_mode,
                           neighbor_radius=self.neighbor_radius, sigma_ratio=self.sigma_ratio,
                           offset_enabled=self.offset, decode_threshold=self.decode_threshold,
                           scale_on_neighbors=self.scale_on_neighbors)

    def loss_config(self) -> LossConfig:
        return LossConfig(gamma=self.gamma, beta=self.beta, lambda_c=self.lambda_c,
                          lambda_s=self.lambda_s, lambda_o=self.lambda_o,
                          smooth_l1_delta=self.smooth_l1_delta)

    def augment_params(self) -> AugmentParams:
        return AugmentParams(hflip_prob=self.hflip_prob, scale_range=tuple(self.scale_range),
                             crop_size=self.crop_size, brightness_jitter=self.brightness_jitter,
                             seed=self.random_state)

    def aspect_policy(self) -> AspectPolicy:
        if self.scale_mode == "height_width":
            return AspectPolicy("free")
        return AspectPolicy("fixed", self.aspect_ratio)

    # --- training ----------------------------------------------------------------

    def _init_state(self):
        cfg = self.model_config()
        self.model_ = build_model(cfg)
        self.optim_state_ = nx.OptimState(lr=self.learning_rate)
        self.ema_state_ = nx.EmaState.from_params(self.model_.params, self.ema_decay)
        self.n_iter_ = 0
        self.history_ = []

    def _lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "cosine":
            frac = min(step / max(self.n_iter, 1), 1.0)
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
        raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def _epoch_perm(self, epoch: int, n: int) -> np.ndarray:
        cache = self._perm_cache
        if epoch not in cache:
            cache.clear()
            cache[epoch] = np.random.default_rng([self.random_state, _PERM, epoch]).permutation(n)
        return cache[epoch]

    def _make_batch(self, images, annotations, step: int, codec: CodecConfig, aug: AugmentParams):
        n = len(images)
        batch_imgs, maps = [], []
        for b in range(self.batch_size):
            q = step * self.batch_size + b
            epoch, pos = divmod(q, n)
            idx = int(self._epoch_perm(epoch, n)[pos])
            img, anns = images[idx], annotations[idx]
            h, w = img.shape[:2]
            if self.center_jitter > 0:
                jrng = np.random.default_rng([self.random_state, _JITTER, epoch, idx])
                anns = jitter_annotations(anns, self.center_jitter, jrng, w, h)
            arng = np.random.default_rng([self.random_state, _AUG, step, b])
            img, anns = augment(DatasetRecord(w, h, anns, image=img), aug, arng)
            ih, iw = img.shape[:2]
            batch_imgs.append(img.transpose(2, 0, 1))
            maps.append(encode_targets(anns, iw, ih, codec))
        x = np.stack(batch_imgs).astype(self.dtype)
        return x, stack_targets(maps)

    def fit(self, X, y, callback: Optional[Callable] = None):
        """Train for ``n_iter`` total steps.

        ``callback(estimator, step, report)`` runs after every step; a truthy
        return value stops training early.
        """
        images = check_images(X)
        annotations = check_annotations(y, images)
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise ValueError(f"training images must share one size, got {sorted(shapes)}")
        codec = self.codec_config()
        aug = self.augment_params()
        loss_cfg = self.loss_config()
        h, w = images[0].shape[:2]
        cw, ch = aug.crop_size or (w, h)
        mult = self.model_config().input_multiple
        if cw % mult or ch % mult:
            raise ValueError(f"training input {cw}x{ch} must be divisible by {mult}; set crop_size")
        if not (self.warm_start and hasattr(self, "model_")):
            self._init_state()
        self._perm_cache = {}
        imgs32 = [img.astype(np.float32) for img in images]
        while self.n_iter_ < self.n_iter:
            step = self.n_iter_
            x, targets = self._make_batch(imgs32, annotations, step, codec, aug)
            # EMA warm-up so early random weights decay out quickly
            decay = min(self.ema_decay, (1.0 + step) / (10.0 + step))
            self.optim_state_.lr = self._lr_at(step)
            report = train_step(self.model_, x, targets, loss_cfg, self.optim_state_,
                                self.ema_state_, decay)
            self.n_iter_ += 1
            self.history_.append({"step": self.n_iter_, **report.as_dict()})
            if self.verbose and (self.n_iter_ % max(1, self.verbose) == 0):
                logger.info("step %d total %.5f center %.4f scale %.4f offset %.4f",
                            self.n_iter_, report.total, report.center, report.scale, report.offset)
            if callback is not None and callback(self, self.n_iter_, report):
                break
        return self

    # --- inference ---------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("CSPDetector is not fitted yet; call fit() or load a checkpoint")

    def inference_params(self) -> dict:
        self._check_fitted()
        return self.ema_state_.shadow if self.use_ema else self.model_.params

    def predict_maps(self, X, batch_size: int = 16):
        """Raw maps per image: list of (center (Hm, Wm), scale (C, Hm, Wm), offset or None, pad)."""
        self._check_fitted()
        images = check_images(X)
        params = self.inference_params()
        mult = self.model_.cfg.input_multiple
        out = [None] * len(images)
        groups: dict = {}
        for i, img in enumerate(images):
            groups.setdefault(img.shape, []).append(i)
        for shape, idxs in groups.items():
            top, bottom, left, right = symmetric_padding(shape[0], shape[1], mult)
            for s in range(0, len(idxs), batch_size):
                chunk = idxs[s:s + batch_size]
                x = np.stack([np.pad(images[i], ((top, bottom), (left, right), (0, 0)))
                              .transpose(2, 0, 1) for i in chunk]).astype(self.dtype)
                pred, _ = forward(self.model_, x, params)
                for k, i in enumerate(chunk):
                    off = None if pred.offset is None else pred.offset[k]
                    out[i] = (pred.center[k, 0], pred.scale[k], off, (top, left))
        return out

    def predict(self, X, threshold: Optional[float] = None,
                nms_threshold: Optional[float] = None) -> list[list[Detection]]:
        images = check_images(X)
        codec = self.codec_config()
        if threshold is not None:
            codec.decode_threshold = threshold
        nms_t = self.nms_threshold if nms_threshold is None else nms_threshold
        policy = self.aspect_policy()
        results = []
        for img, (center, scale, off, (top, left)) in zip(images, self.predict_maps(images)):
            h, w = img.shape[:2]
            hp = center.shape[0] * codec.r
            wp = center.shape[1] * codec.r
            dets = decode_detections(center, scale, off, wp, hp, codec, policy, nms_thresh=None)
            shifted = []
            for d in dets:
                b = d.box
                box = _clip(b.x1 - left, b.y1 - top, b.x2 - left, b.y2 - top, w, h)
                if box is not None:
                    shifted.append(Detection(box, d.score, d.cell))
            results.append(nms(shifted, nms_t) if nms_t is not None else shifted)
        return results

    def evaluate(self, X, y, iou_thresholds: Sequence[float] = (0.5, 0.75)) -> dict:
        images = check_images(X)
        gts = check_annotations(y, images)
        dets = self.predict(images)
        return {t: evaluate(dets, gts, t) for t in iou_thresholds}

    def score(self, X, y) -> float:
        """Average precision at IoU 0.5."""
        return self.evaluate(X, y, (0.5,))[0.5]["ap"]


def _clip(x1, y1, x2, y2, w, h) -> Optional[BoundBox]:
    x1, y1, x2, y2 = max(x1, 0.0), max(y1, 0.0), min(x2, float(w)), min(y2, float(h))
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundBox(x1, y1, x2, y2)
