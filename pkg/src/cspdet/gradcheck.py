"""Finite-difference verification of every analytic backward pass.

``run_gradcheck(scope)`` returns one ``CheckResult`` per component with the
worst relative error seen over its random instances.  Ops and losses are
held to 1e-5, the whole model to 1e-4, all in float64 with fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import loss as L
from . import numerics as nx
from .codec import CodecConfig, encode_targets, stack_targets
from .geometry import ObjectAnnotation
from .network import ModelConfig, backward, build_model, compute_loss, forward

OP_TOL = 1e-5
MODEL_TOL = 1e-4
SCOPES = ("ops", "losses", "model")


@dataclass
class CheckResult:
    scope: str
    component: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.scope:7s} {self.component:22s} worst={self.worst:.3e} tol={self.tol:.0e} {status}"


def _rand_conv(rng, transposed=False):
    while True:
        stride, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        k, pad = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        wshape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        size = nx.deconv_output_size if transposed else nx.conv_output_size
        if min(size(h, k, stride, pad, dil), size(w, k, stride, pad, dil)) >= 1:
            break
    p = nx.ConvParams(rng.normal(size=wshape), rng.normal(size=cout), stride, pad, dil)
    return rng.normal(size=(int(rng.integers(1, 3)), cin, h, w)), p


def _layer_error(x, p, fwd, bwd, rng) -> float:
    y = fwd(x, p)
    g = rng.normal(size=y.shape)
    gx, gw, gb = bwd(x, p, g)
    worst = 0.0
    worst = max(worst, nx.relative_error(gx, nx.finite_diff_grad(lambda v: float(np.sum(fwd(v, p) * g)), x.copy())))

    def f_w(v):
        return float(np.sum(fwd(x, nx.ConvParams(v, p.bias, p.stride, p.padding, p.dilation)) * g))

    def f_b(v):
        return float(np.sum(fwd(x, nx.ConvParams(p.weight, v, p.stride, p.padding, p.dilation)) * g))

    worst = max(worst, nx.relative_error(gw, nx.finite_diff_grad(f_w, p.weight.copy())))
    return max(worst, nx.relative_error(gb, nx.finite_diff_grad(f_b, p.bias.copy())))


def _check_elementwise(fwd, bwd, make_x, rng, n) -> float:
    worst = 0.0
    for _ in range(n):
        x = make_x(rng)
        g = rng.normal(size=x.shape)
        num = nx.finite_diff_grad(lambda v: float(np.sum(fwd(v) * g)), x.copy())
        worst = max(worst, nx.relative_error(bwd(x, g), num))
    return worst


def _away_from_zero(rng, shape=(2, 3, 4, 4)):
    # keep relu inputs off the kink so central differences are exact
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-3, 0.5, x)


def check_ops(seed: int = 0, n: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 10])
    out = []
    out.append(CheckResult("ops", "conv2d", max(
        _layer_error(*_rand_conv(rng), nx.conv2d_forward, nx.conv2d_backward, rng) for _ in range(n)), OP_TOL))
    out.append(CheckResult("ops", "deconv2d", max(
        _layer_error(*_rand_conv(rng, True), nx.deconv2d_forward, nx.deconv2d_backward, rng)
        for _ in range(n)), OP_TOL))
    out.append(CheckResult("ops", "l2_normalize", _check_elementwise(
        nx.l2_normalize, nx.l2_normalize_backward,
        lambda r: r.normal(size=(2, int(r.integers(2, 6)), 3, 3)), rng, n), OP_TOL))
    out.append(CheckResult("ops", "relu", _check_elementwise(
        nx.relu, nx.relu_backward, _away_from_zero, rng, n), OP_TOL))
    out.append(CheckResult("ops", "sigmoid", _check_elementwise(
        nx.sigmoid, nx.sigmoid_backward, lambda r: 3 * r.normal(size=(2, 1, 4, 4)), rng, n), OP_TOL))
    return out


def check_losses(seed: int = 0, n: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 20])
    cfg = L.LossConfig()
    worst_c = worst_s = worst_o = worst_h = 0.0
    for _ in range(n):
        shape = (2, 5, 6)
        p = rng.uniform(0.02, 0.98, size=shape)
        y = (rng.uniform(size=shape) < 0.1).astype(float)
        y[0, 0, 0] = 1
        m = np.where(y == 1, 1.0, rng.uniform(0, 0.95, size=shape))
        _, g = L.center_loss(p, y, m, cfg)
        num = nx.finite_diff_grad(lambda v: L.center_loss(v, y, m, cfg)[0], p.copy())
        worst_c = max(worst_c, nx.relative_error(g, num))

        s, t = rng.normal(scale=1.5, size=(2, 1, 5, 6)), rng.normal(size=(2, 1, 5, 6))
        w = y[:, None].copy()
        _, g = L.scale_loss(s, t, w, cfg)
        num = nx.finite_diff_grad(lambda v: L.scale_loss(v, t, w, cfg)[0], s.copy())
        worst_s = max(worst_s, nx.relative_error(g, num))

        o, to = rng.normal(size=(2, 2, 5, 6)), rng.uniform(size=(2, 2, 5, 6))
        _, g = L.offset_loss(o, to, y, cfg)
        num = nx.finite_diff_grad(lambda v: L.offset_loss(v, to, y, cfg)[0], o.copy())
        worst_o = max(worst_o, nx.relative_error(g, num))

        x = 3 * rng.normal(size=20)
        x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, 0.5, x)
        _, d = L.smooth_l1(x)
        num = nx.finite_diff_grad(lambda v: float(np.sum(L.smooth_l1(v)[0])), x.copy())
        worst_h = max(worst_h, nx.relative_error(d, num))
    return [CheckResult("losses", "center_loss", worst_c, OP_TOL),
            CheckResult("losses", "scale_loss", worst_s, OP_TOL),
            CheckResult("losses", "offset_loss", worst_o, OP_TOL),
            CheckResult("losses", "smooth_l1", worst_h, OP_TOL)]


def tiny_model_config(seed: int = 0, **overrides) -> ModelConfig:
    kw = dict(stage_channels=(4, 4, 6, 6), head_channels=6, dtype="float64", seed=seed)
    kw.update(overrides)
    return ModelConfig(**kw)


def check_model(seed: int = 0, cfg: ModelConfig | None = None) -> list[CheckResult]:
    """Whole-network gradient of the total loss against every parameter entry."""
    cfg = cfg or tiny_model_config(seed)
    model = build_model(cfg)
    rng = np.random.default_rng([seed, 30])
    # perturb biases so no relu sits exactly at 0 and every head term is active
    for name, p in model.params.items():
        if name.endswith(".b"):
            p += rng.normal(scale=0.05, size=p.shape)
    x = rng.uniform(0, 1, size=(1, 3, 32, 32))
    objs = [ObjectAnnotation(9.5, 11.0, 14.0, 5.74), ObjectAnnotation(22.3, 19.7, 20.0, 8.2)]
    codec = CodecConfig(r=cfg.r, scale_mode=cfg.scale_mode, offset_enabled=cfg.offset_enabled)
    targets = stack_targets([encode_targets(objs, 32, 32, codec)])
    loss_cfg = L.LossConfig()

    def total(params=None):
        pred, _ = forward(model, x, params)
        return compute_loss(pred, targets, loss_cfg, cfg.offset_enabled)[0].total

    pred, cache = forward(model, x)
    _, pgrads = compute_loss(pred, targets, loss_cfg, cfg.offset_enabled)
    analytic = backward(model, cache, pgrads)
    worst_by_group: dict[str, float] = {}
    for name, p in model.params.items():
        num = nx.finite_diff_grad(lambda v: total(), p)
        group = name.split(".")[0]
        err = nx.relative_error(analytic[name], num)
        worst_by_group[group] = max(worst_by_group.get(group, 0.0), err)
    return [CheckResult("model", f"model.{g}", e, MODEL_TOL) for g, e in worst_by_group.items()]


def run_gradcheck(scope: str = "all", seed: int = 0) -> list[CheckResult]:
    if scope not in SCOPES + ("all",):
        raise ValueError(f"scope must be one of {SCOPES + ('all',)}, got {scope!r}")
    results = []
    if scope in ("ops", "all"):
        results += check_ops(seed)
    if scope in ("losses", "all"):
        results += check_losses(seed)
    if scope in ("model", "all"):
        results += check_model(seed)
    return results
