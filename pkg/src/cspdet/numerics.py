"""Dense NCHW tensor math with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape (batch, channel, height,
width).  Every forward op here has a paired backward that returns exact
adjoints; ``finite_diff_grad`` is the independent oracle used to check them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

L2_EPS = 1e-10
ADAM_EPS = 1e-8
SNAPSHOT_MAGIC = b"CSPT"


@dataclass
class ConvParams:
    """Weights and geometry of a 2-D (transposed) convolution.

    For ``conv2d_*`` the weight layout is (out_ch, in_ch, kh, kw).  For
    ``deconv2d_*`` it is (in_ch, out_ch, kh, kw): the same array a conv
    mapping out_ch -> in_ch would use, which makes the deconvolution that
    conv's input-gradient.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"weight must be 4-D, got shape {self.weight.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(
                f"invalid geometry stride={self.stride} padding={self.padding} "
                f"dilation={self.dilation}"
            )


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_4d(x: np.ndarray, name: str):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, dilation: int):
    """Gather receptive fields into a (C*kh*kw, N*Ho*Wo) matrix."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for a in range(kh):
        ya = a * dilation
        for b in range(kw):
            xb = b * dilation
            cols[:, a, b] = xt[:, :, ya:ya + stride * (ho - 1) + 1:stride,
                               xb:xb + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            dilation: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for a in range(kh):
        ya = a * dilation
        for b in range(kw):
            xb = b * dilation
            out[:, :, ya:ya + stride * (ho - 1) + 1:stride,
                xb:xb + stride * (wo - 1) + 1:stride] += cols[:, a, b]
    out = out.transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def _conv_forward_cached(x: np.ndarray, params: ConvParams):
    _check_4d(x, "input")
    o, c, kh, kw = params.weight.shape
    if x.shape[1] != c:
        raise ValueError(
            f"input has {x.shape[1]} channels but weight expects in_ch={c} "
            f"(weight shape {params.weight.shape})"
        )
    cols, ho, wo = _im2col(x, kh, kw, params.stride, params.padding, params.dilation)
    out = params.weight.reshape(o, -1) @ cols
    out = out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    out = out + params.bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), cols


def _conv_backward_cached(cols: np.ndarray, x_shape, params: ConvParams, grad_out: np.ndarray,
                          need_input_grad: bool = True):
    o, c, kh, kw = params.weight.shape
    n = x_shape[0]
    ho = conv_output_size(x_shape[2], kh, params.stride, params.padding, params.dilation)
    wo = conv_output_size(x_shape[3], kw, params.stride, params.padding, params.dilation)
    if grad_out.shape != (n, o, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != conv output shape {(n, o, ho, wo)}")
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    grad_w = (g2 @ cols.T).reshape(params.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        gcols = params.weight.reshape(o, -1).T @ g2
        grad_x = _col2im(gcols, x_shape, kh, kw, params.stride, params.padding,
                         params.dilation, ho, wo)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Dilated, strided, zero-padded cross-correlation plus bias."""
    return _conv_forward_cached(x, params)[0]


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``conv2d_forward``."""
    _check_4d(grad_out, "grad_out")
    _, c, kh, kw = params.weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c}")
    cols, _, _ = _im2col(x, kh, kw, params.stride, params.padding, params.dilation)
    return _conv_backward_cached(cols, x.shape, params, grad_out)


def deconv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int,
                       output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1 + output_padding


def _deconv_out_shape(x: np.ndarray, params: ConvParams, output_padding: int):
    _check_4d(x, "input")
    ci, co, kh, kw = params.weight.shape
    if x.shape[1] != ci:
        raise ValueError(
            f"input has {x.shape[1]} channels but deconv weight expects in_ch={ci} "
            f"(weight shape {params.weight.shape})"
        )
    ho = deconv_output_size(x.shape[2], kh, params.stride, params.padding, params.dilation,
                            output_padding)
    wo = deconv_output_size(x.shape[3], kw, params.stride, params.padding, params.dilation,
                            output_padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"deconv output would be empty for input {x.shape[2:]}")
    return (x.shape[0], co, ho, wo)


def deconv2d_forward(x: np.ndarray, params: ConvParams, output_padding: int = 0) -> np.ndarray:
    """Transposed convolution (the input-gradient of the matching conv) plus bias."""
    out_shape = _deconv_out_shape(x, params, output_padding)
    ci, co, kh, kw = params.weight.shape
    _, _, ho, wo = out_shape
    # the matching conv maps out_shape -> x; its spatial output must be x's size
    if (conv_output_size(ho, kh, params.stride, params.padding, params.dilation),
            conv_output_size(wo, kw, params.stride, params.padding, params.dilation)) != x.shape[2:]:
        raise ValueError("output_padding too large for the given stride")
    x2 = x.transpose(1, 0, 2, 3).reshape(ci, -1)
    gcols = params.weight.reshape(ci, -1).T @ x2
    out = _col2im(gcols, out_shape, kh, kw, params.stride, params.padding, params.dilation,
                  x.shape[2], x.shape[3])
    return out + params.bias.reshape(1, co, 1, 1)


def deconv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray,
                      output_padding: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for ``deconv2d_forward``."""
    out_shape = _deconv_out_shape(x, params, output_padding)
    if grad_out.shape != out_shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != deconv output shape {out_shape}")
    ci, co, kh, kw = params.weight.shape
    cols, _, _ = _im2col(grad_out, kh, kw, params.stride, params.padding, params.dilation)
    x2 = x.transpose(1, 0, 2, 3).reshape(ci, -1)
    grad_x = (params.weight.reshape(ci, -1) @ cols).reshape(ci, x.shape[0], *x.shape[2:])
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3))
    grad_w = (x2 @ cols.T).reshape(params.weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def l2_normalize(x: np.ndarray, target_norm: float = 10.0, eps: float = L2_EPS) -> np.ndarray:
    """Rescale every channel vector to Euclidean norm ``target_norm``.

    Zero vectors stay zero (the denominator is ``norm + eps``).
    """
    if target_norm <= 0:
        raise ValueError(f"target_norm must be positive, got {target_norm}")
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x * (target_norm / (norm + eps))


def l2_normalize_backward(x: np.ndarray, grad_out: np.ndarray, target_norm: float = 10.0,
                          eps: float = L2_EPS) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    denom = norm + eps
    dot = np.sum(x * grad_out, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return target_norm / denom * (grad_out - x * dot / (safe * denom))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


_ACTIVATIONS = {
    "relu": (relu, relu_backward),
    "sigmoid": (sigmoid, sigmoid_backward),
}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        return _ACTIVATIONS[kind][0](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def activation_backward(x: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    try:
        return _ACTIVATIONS[kind][1](x, grad_out)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimState) -> OptimState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.999

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray], decay: float = 0.999) -> "EmaState":
        return cls({k: v.copy() for k, v in params.items()}, decay)


def ema_update(weights: Mapping[str, np.ndarray], ema: EmaState,
               decay: float | None = None) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * weights``; ``decay`` overrides ``ema.decay``."""
    d = ema.decay if decay is None else decay
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {d}")
    for name, w in weights.items():
        s = ema.shadow[name]
        if s.shape != w.shape:
            raise ValueError(f"shadow {name!r} shape {s.shape} != weight shape {w.shape}")
        s *= d
        s += (1.0 - d) * w
    return ema


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x is restored afterwards)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Worst entrywise relative error.

    Entries whose magnitude is below ``floor`` times the largest numeric
    entry are measured against that floor instead, so round-off on
    near-zero entries does not dominate.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def save_tensor(path, x: np.ndarray) -> None:
    """Write a tensor snapshot: ``CSPT``, 4 int32 LE dims, float64 LE row-major data.

    Arrays with fewer than 4 dims are left-padded with unit dims.
    """
    x = np.asarray(x)
    if x.ndim > 4:
        raise ValueError(f"snapshots hold at most 4 dims, got {x.ndim}")
    shape = (1,) * (4 - x.ndim) + x.shape
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<4i", *shape))
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a tensor snapshot (bad magic {data[:4]!r})")
    shape = struct.unpack("<4i", data[4:20])
    if any(s < 0 for s in shape):
        raise ValueError(f"{path}: negative dimension in {shape}")
    count = int(np.prod(shape))
    payload = data[20:]
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: expected {8 * count} data bytes for shape {shape}, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
