"""A small fully-convolutional center-and-scale model with hand-written backward.

Layout::

    stem (3x3/2) -> stage2 (/4) -> stage3 (/8) -> stage4 (/16) -> stage5 (/16, dilated)
    each fused stage -> deconv (or strided conv) to the map resolution -> L2 rescale to 10
    concat [-> extra 4x4/2 deconv when r == 2] -> 3x3 conv + relu
        -> 1x1 center logit (sigmoid), 1x1 log-scale, 1x1 offset
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .codec import SCALE_MODES, TargetMaps
from .loss import LossConfig, LossReport, center_loss, offset_loss, scale_loss, total_loss

CENTER_PRIOR = 0.01
FUSE_NORM = 10.0


@dataclass
class ModelConfig:
    stage_channels: tuple = (16, 32, 64, 64)
    stages_fused: tuple = (3, 4, 5)
    r: int = 4
    head_channels: int = 64
    offset_enabled: bool = True
    scale_mode: str = "height"
    dilate_last_stage: bool = True
    scale_bias_init: float = 0.0
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stages_fused = tuple(sorted(int(s) for s in self.stages_fused))
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError(f"stage_channels needs 4 positive entries, got {self.stage_channels}")
        if not self.stages_fused:
            raise ValueError("stages_fused must not be empty")
        if not set(self.stages_fused) <= {2, 3, 4, 5} or len(set(self.stages_fused)) != len(self.stages_fused):
            raise ValueError(f"stages_fused must be distinct members of {{2, 3, 4, 5}}, got {self.stages_fused}")
        if self.r not in (2, 4, 8, 16):
            raise ValueError(f"r must be one of 2, 4, 8, 16, got {self.r}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.head_channels < 1:
            raise ValueError("head_channels must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def input_multiple(self) -> int:
        return 16 if self.dilate_last_stage else 32

    def stage_stride(self, stage: int) -> int:
        if stage == 5:
            return 16 if self.dilate_last_stage else 32
        return 2 ** stage

    @property
    def fuse_stride(self) -> int:
        return max(self.r, 4)

    @property
    def scale_channels(self) -> int:
        return 2 if self.scale_mode == "height_width" else 1


@dataclass
class Prediction:
    center: np.ndarray
    scale: np.ndarray
    offset: Optional[np.ndarray] = None


# --- layers -------------------------------------------------------------------

class _Conv:
    def __init__(self, name, stride=1, padding=0, dilation=1, transposed=False):
        self.name = name
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.transposed = transposed

    def _params(self, params):
        return nx.ConvParams(params[self.name + ".w"], params[self.name + ".b"],
                             self.stride, self.padding, self.dilation)

    def forward(self, x, params):
        cp = self._params(params)
        if self.transposed:
            return nx.deconv2d_forward(x, cp), x
        y, cols = nx._conv_forward_cached(x, cp)
        return y, (cols, x.shape)

    def backward(self, cache, gy, params, grads):
        cp = self._params(params)
        if self.transposed:
            gx, gw, gb = nx.deconv2d_backward(cache, cp, gy)
        else:
            cols, shape = cache
            gx, gw, gb = nx._conv_backward_cached(cols, shape, cp, gy)
        grads[self.name + ".w"] = grads.get(self.name + ".w", 0) + gw
        grads[self.name + ".b"] = grads.get(self.name + ".b", 0) + gb
        return gx


class _Relu:
    def forward(self, x, params):
        return nx.relu(x), x

    def backward(self, cache, gy, params, grads):
        return nx.relu_backward(cache, gy)


class _L2Norm:
    def forward(self, x, params):
        return nx.l2_normalize(x, FUSE_NORM), x

    def backward(self, cache, gy, params, grads):
        return nx.l2_normalize_backward(cache, gy, FUSE_NORM)


def _run(layers, x, params):
    caches = []
    for layer in layers:
        x, c = layer.forward(x, params)
        caches.append(c)
    return x, caches


def _run_back(layers, caches, g, params, grads):
    for layer, c in zip(reversed(layers), reversed(caches)):
        g = layer.backward(c, g, params, grads)
    return g


# --- model --------------------------------------------------------------------

class CspModel:
    """Parameters plus the static layer graph; see :func:`build_model`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        self.version = 0
        self._shapes: dict[str, tuple] = {}
        c2, c3, c4, c5 = cfg.stage_channels
        chans = {2: c2, 3: c3, 4: c4, 5: c5}
        self.stages: dict[int, list] = {}
        self._add_conv("stem", 3, c2, 3, transposed=False)
        self.stem = [_Conv("stem", stride=2, padding=1), _Relu()]
        prev = c2
        self.last_stage = max(cfg.stages_fused)
        for s in range(2, self.last_stage + 1):
            c = chans[s]
            if s == 5 and cfg.dilate_last_stage:
                first = _Conv(f"stage{s}.conv1", stride=1, padding=2, dilation=2)
                second = _Conv(f"stage{s}.conv2", stride=1, padding=2, dilation=2)
            else:
                first = _Conv(f"stage{s}.conv1", stride=2, padding=1)
                second = _Conv(f"stage{s}.conv2", stride=1, padding=1)
            self._add_conv(f"stage{s}.conv1", prev, c, 3)
            self._add_conv(f"stage{s}.conv2", c, c, 3)
            self.stages[s] = [first, _Relu(), second, _Relu()]
            prev = c

        self.branches: dict[int, list] = {}
        for s in cfg.stages_fused:
            layers = []
            ratio = cfg.stage_stride(s) / cfg.fuse_stride
            c = chans[s]
            if ratio > 1:
                for k in range(int(round(math.log2(ratio)))):
                    name = f"fuse{s}.up{k + 1}"
                    self._add_conv(name, c, c, 4, transposed=True)
                    layers.append(_Conv(name, stride=2, padding=1, transposed=True))
            elif ratio < 1:
                for k in range(int(round(math.log2(1 / ratio)))):
                    name = f"fuse{s}.down{k + 1}"
                    self._add_conv(name, c, c, 3)
                    layers.append(_Conv(name, stride=2, padding=1))
            layers.append(_L2Norm())
            self.branches[s] = layers
        cat = sum(chans[s] for s in cfg.stages_fused)
        self.post = []
        if cfg.r == 2:
            self._add_conv("fuse.up_r2", cat, cat, 4, transposed=True)
            self.post = [_Conv("fuse.up_r2", stride=2, padding=1, transposed=True)]
        hc = cfg.head_channels
        self._add_conv("head.conv", cat, hc, 3)
        self.head = [_Conv("head.conv", padding=1), _Relu()]
        self._add_conv("head.center", hc, 1, 1, head=True)
        self._add_conv("head.scale", hc, cfg.scale_channels, 1, head=True)
        if cfg.offset_enabled:
            self._add_conv("head.offset", hc, 2, 1, head=True)
        self.center_conv = _Conv("head.center")
        self.scale_conv = _Conv("head.scale")
        self.offset_conv = _Conv("head.offset") if cfg.offset_enabled else None
        self._init_params()

    def _add_conv(self, name, cin, cout, k, transposed=False, head=False):
        wshape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self._shapes[name + ".w"] = (wshape, "head" if head else ("deconv" if transposed else "conv"))
        self._shapes[name + ".b"] = ((cout,), "bias")

    def _init_params(self):
        rng = np.random.default_rng(self.cfg.seed)
        dtype = np.dtype(self.cfg.dtype)
        for name, (shape, kind) in self._shapes.items():
            if kind == "bias":
                w = np.zeros(shape)
                if name == "head.center.b":
                    w[:] = math.log(CENTER_PRIOR / (1 - CENTER_PRIOR))
                elif name == "head.scale.b":
                    w[:] = self.cfg.scale_bias_init
            elif kind == "head":
                w = rng.normal(0.0, 0.01, size=shape)
            elif kind == "deconv":
                cin, _, k, _ = shape
                w = rng.normal(0.0, math.sqrt(1.0 / (cin * k * k / 4)), size=shape)
            else:
                _, cin, k, _ = shape
                w = rng.normal(0.0, math.sqrt(2.0 / (cin * k * k)), size=shape)
            self.params[name] = w.astype(dtype)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_params(self, params: dict):
        for name, value in params.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != value.shape:
                raise ValueError(f"parameter {name!r} shape {value.shape} != {self.params[name].shape}")
            self.params[name] = np.asarray(value, dtype=self.params[name].dtype).copy()
        self.version += 1


def build_model(cfg: ModelConfig) -> CspModel:
    return CspModel(cfg)


@dataclass
class ForwardCache:
    version: int
    input_shape: tuple
    stem: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)
    split: list = field(default_factory=list)
    post: list = field(default_factory=list)
    head: list = field(default_factory=list)
    head_out: tuple = ()
    logits: Optional[np.ndarray] = None


def check_input(model: CspModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"images must have shape (N, 3, H, W), got {images.shape}")
    m = model.cfg.input_multiple
    h, w = images.shape[2:]
    if h % m or w % m:
        raise ValueError(
            f"input {h}x{w} is not divisible by {m}; pad by "
            f"{(-h) % m} rows and {(-w) % m} columns"
        )
    return images.astype(model.cfg.dtype, copy=False)


def forward(model: CspModel, images: np.ndarray, params: Optional[dict] = None):
    """Run the network; returns ``(Prediction, ForwardCache)``.

    ``params`` substitutes another weight set with the same layout (e.g. EMA
    shadow weights) without touching the model.
    """
    params = model.params if params is None else params
    x = check_input(model, images)
    cache = ForwardCache(model.version, x.shape)
    x, cache.stem = _run(model.stem, x, params)
    feats = {}
    for s in range(2, model.last_stage + 1):
        x, cache.stages[s] = _run(model.stages[s], x, params)
        feats[s] = x
    fused = []
    for s in model.cfg.stages_fused:
        y, cache.branches[s] = _run(model.branches[s], feats[s], params)
        fused.append(y)
        cache.split.append(y.shape[1])
    x = np.concatenate(fused, axis=1)
    x, cache.post = _run(model.post, x, params)
    x, cache.head = _run(model.head, x, params)
    logits, c_c = model.center_conv.forward(x, params)
    scale, c_s = model.scale_conv.forward(x, params)
    offset, c_o = (model.offset_conv.forward(x, params) if model.offset_conv else (None, None))
    cache.head_out = (c_c, c_s, c_o)
    cache.logits = logits.astype(np.float64)
    center = nx.sigmoid(cache.logits)
    pred = Prediction(center, scale.astype(np.float64),
                      None if offset is None else offset.astype(np.float64))
    return pred, cache


def backward(model: CspModel, cache: ForwardCache, grads: Prediction,
             params: Optional[dict] = None) -> dict[str, np.ndarray]:
    """Parameter gradients given loss gradients w.r.t. the ``Prediction`` maps.

    ``grads.center`` is the gradient w.r.t. post-sigmoid probabilities.
    """
    if cache.version != model.version:
        raise RuntimeError("stale forward cache: model parameters changed since forward()")
    params = model.params if params is None else params
    dtype = np.dtype(model.cfg.dtype)
    out: dict[str, np.ndarray] = {}
    c_c, c_s, c_o = cache.head_out
    glogit = nx.sigmoid_backward(cache.logits, np.asarray(grads.center, dtype=np.float64))
    g = model.center_conv.backward(c_c, glogit.astype(dtype), params, out)
    g = g + model.scale_conv.backward(c_s, np.asarray(grads.scale, dtype=dtype), params, out)
    if model.offset_conv is not None:
        go = grads.offset if grads.offset is not None else np.zeros_like(g[:, :2])
        g = g + model.offset_conv.backward(c_o, np.asarray(go, dtype=dtype), params, out)
    g = _run_back(model.head, cache.head, g, params, out)
    g = _run_back(model.post, cache.post, g, params, out)
    pieces = np.split(g, np.cumsum(cache.split)[:-1], axis=1)
    gfeat = {}
    for s, gp in zip(model.cfg.stages_fused, pieces):
        gfeat[s] = _run_back(model.branches[s], cache.branches[s], gp, params, out)
    gx = None
    for s in range(model.last_stage, 1, -1):
        gs = gfeat.get(s)
        if gx is not None:
            gs = gx if gs is None else gs + gx
        gx = _run_back(model.stages[s], cache.stages[s], gs, params, out)
    _run_back(model.stem, cache.stem, gx, params, out)
    for name, p in model.params.items():
        if name not in out:
            out[name] = np.zeros_like(p)
        else:
            out[name] = np.asarray(out[name], dtype=p.dtype).reshape(p.shape)
    return out


def compute_loss(pred: Prediction, targets: TargetMaps, loss_cfg: LossConfig,
                 offset_enabled: bool):
    """Loss report and gradients w.r.t. the prediction maps for a batch."""
    k = targets.num_positives
    lc, gc = center_loss(pred.center[:, 0], targets.center, targets.gauss, loss_cfg, k)
    ls, gs = scale_loss(pred.scale, targets.scale, targets.scale_weight, loss_cfg)
    lo, go = 0.0, None
    if offset_enabled and pred.offset is not None:
        lo, go = offset_loss(pred.offset, targets.offset, targets.offset_weight, loss_cfg)
    report = total_loss(lc, ls, lo, loss_cfg, offset_enabled, k)
    grads = Prediction(loss_cfg.lambda_c * gc[:, None], loss_cfg.lambda_s * gs,
                       None if go is None else loss_cfg.lambda_o * go)
    return report, grads


def train_step(model: CspModel, images: np.ndarray, targets: TargetMaps, loss_cfg: LossConfig,
               optim: nx.OptimState, ema: Optional[nx.EmaState] = None,
               ema_decay: Optional[float] = None) -> LossReport:
    """forward -> losses -> backward -> Adam -> EMA; returns the pre-update loss."""
    pred, cache = forward(model, images)
    report, grads = compute_loss(pred, targets, loss_cfg, model.cfg.offset_enabled)
    pgrads = backward(model, cache, grads)
    nx.adam_step(model.params, pgrads, optim)
    model.version += 1
    if ema is not None:
        nx.ema_update(model.params, ema, ema_decay)
    return report
