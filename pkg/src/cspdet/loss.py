"""Focal center loss, smooth-L1 scale/offset losses and their weighted sum.

Each loss returns ``(value, grad)`` where ``grad`` is the exact derivative
with respect to the prediction it was given (post-sigmoid probabilities for
the center term).  Computation is always in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_CLAMP = 1e-12


@dataclass
class LossConfig:
    gamma: float = 2.0
    beta: float = 4.0
    lambda_c: float = 0.01
    lambda_s: float = 1.0
    lambda_o: float = 0.1
    smooth_l1_delta: float = 1.0

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError(f"gamma and beta must be >= 0, got {self.gamma}, {self.beta}")
        if min(self.lambda_c, self.lambda_s, self.lambda_o) < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.smooth_l1_delta > 0:
            raise ValueError(f"smooth_l1_delta must be positive, got {self.smooth_l1_delta}")


@dataclass
class LossReport:
    center: float
    scale: float
    offset: float
    total: float
    positives: int

    def as_dict(self) -> dict:
        return {"center": self.center, "scale": self.scale, "offset": self.offset,
                "total": self.total, "positives": self.positives}


def _pow(base: np.ndarray, exponent: float) -> np.ndarray:
    return np.ones_like(base) if exponent == 0 else base ** exponent


def center_loss(p, y, gauss, cfg: LossConfig = LossConfig(), num_pos=None):
    """Focal cross-entropy over all cells, normalised by the positive count.

    ``p`` must lie in [0, 1]; it is clamped to ``[1e-12, 1 - 1e-12]`` before
    the log.  With zero positives the loss and its gradient are zero.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(gauss, dtype=np.float64)
    if p.shape != y.shape or p.shape != m.shape:
        raise ValueError(f"shape mismatch: p {p.shape}, y {y.shape}, gauss {m.shape}")
    if not np.all(np.isfinite(p)) or p.min(initial=0.5) < 0 or p.max(initial=0.5) > 1:
        raise ValueError("center probabilities must be finite and within [0, 1]")
    k = int(y.sum()) if num_pos is None else int(num_pos)
    if k == 0:
        return 0.0, np.zeros_like(p)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    clamped = (p != pc)
    g = cfg.gamma
    pos = y == 1
    # positives: -(1-p)^g log p ; negatives: -(1-M)^b p^g log(1-p)
    q = np.where(pos, pc, 1.0 - pc)               # p-hat
    alpha = np.where(pos, 1.0, _pow(1.0 - m, cfg.beta))
    logq = np.log(q)
    focal = _pow(1.0 - q, g)
    value = -np.sum(alpha * focal * logq) / k
    # d/dq of -(1-q)^g log q
    dfocal = g * _pow(1.0 - q, g - 1) if g != 0 else np.zeros_like(q)
    dq = -(-dfocal * logq + focal / q)
    dp = np.where(pos, dq, -dq) * alpha / k
    dp[clamped] = 0.0
    return float(value), dp


def smooth_l1(x, delta: float = 1.0):
    """Huber-style smooth L1 (quadratic below ``delta``); returns (value, derivative)."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    small = ax < delta
    value = np.where(small, 0.5 * x * x / delta, ax - 0.5 * delta)
    deriv = np.where(small, x / delta, np.sign(x))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _masked_smooth_l1(pred, target, weight, delta):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != weight.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, "
                         f"weight {weight.shape}")
    n = weight.sum()
    if n == 0:
        return 0.0, np.zeros_like(pred)
    val, der = smooth_l1(pred - target, delta)
    return float(np.sum(val * weight) / n), der * weight / n


def scale_loss(s, t, weight, cfg: LossConfig = LossConfig()):
    """Mean smooth-L1 of log-scale residuals over weighted entries."""
    return _masked_smooth_l1(s, t, weight, cfg.smooth_l1_delta)


def offset_loss(o, t, weight, cfg: LossConfig = LossConfig()):
    """Mean smooth-L1 over both offset channels at weighted cells.

    ``weight`` may be channel-less (N, H, W) or (H, W); it is broadcast over
    the offset channel axis.
    """
    o = np.asarray(o, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim == o.ndim - 1:
        weight = np.broadcast_to(np.expand_dims(weight, -3), o.shape)
    return _masked_smooth_l1(o, t, weight, cfg.smooth_l1_delta)


def total_loss(center: float, scale: float, offset: float, cfg: LossConfig = LossConfig(),
               offset_enabled: bool = True, positives: int = 0) -> LossReport:
    if not all(np.isfinite(v) for v in (center, scale, offset)):
        raise FloatingPointError(
            f"non-finite loss component(s): center={center}, scale={scale}, offset={offset}")
    if not offset_enabled:
        offset = 0.0
    total = cfg.lambda_c * center + cfg.lambda_s * scale
    if offset_enabled:
        total += cfg.lambda_o * offset
    return LossReport(float(center), float(scale), float(offset), float(total), int(positives))
