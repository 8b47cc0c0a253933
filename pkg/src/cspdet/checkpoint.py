"""Checkpoint directories: one tensor snapshot per array plus ``manifest.json``.

Layout::

    manifest.json
    params/<name>.cspt     live weights
    ema/<name>.cspt        moving-average weights (used for inference)
    adam_m/<name>.cspt     Adam first moments
    adam_v/<name>.cspt     Adam second moments

Snapshots are float64 on disk and cast back to the model dtype on load, so
float32 and float64 runs both round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .network import build_model

FORMAT_VERSION = 1
_GROUPS = ("params", "ema", "adam_m", "adam_v")


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _untuple(v):
    return tuple(_untuple(x) for x in v) if isinstance(v, list) else v


def save_checkpoint(est, directory) -> Path:
    """Write a fitted ``CSPDetector`` to ``directory`` (created if needed)."""
    est._check_fitted()
    d = Path(directory)
    arrays = {"params": est.model_.params, "ema": est.ema_state_.shadow,
              "adam_m": est.optim_state_.m, "adam_v": est.optim_state_.v}
    files: dict[str, dict[str, str]] = {}
    for group, tensors in arrays.items():
        (d / group).mkdir(parents=True, exist_ok=True)
        files[group] = {}
        for name, arr in tensors.items():
            rel = f"{group}/{name}.cspt"
            nx.save_tensor(d / rel, arr)
            files[group][name] = rel
    opt = est.optim_state_
    manifest = {
        "format": FORMAT_VERSION,
        "estimator": {k: _jsonable(v) for k, v in est.get_params().items()},
        "step": int(est.n_iter_),
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step": int(opt.step)},
        "ema_decay": est.ema_state_.decay,
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory):
    """Rebuild the ``CSPDetector`` saved by ``save_checkpoint``."""
    from .estimator import CSPDetector

    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{mpath}: malformed manifest ({exc.msg})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported checkpoint format {manifest.get('format')!r}")
    est = CSPDetector(**{k: _untuple(v) for k, v in manifest["estimator"].items()})
    est._init_state()
    model = est.model_
    loaded = {}
    for group in _GROUPS:
        entries = manifest["files"].get(group, {})
        if group.startswith("adam") and not entries:
            loaded[group] = {}  # moments are created lazily on the first step
            continue
        if set(entries) != set(model.params):
            missing = sorted(set(model.params) ^ set(entries))
            raise ValueError(f"{mpath}: group {group!r} does not match the model layout "
                             f"(mismatched: {missing[:5]})")
        loaded[group] = {}
        for name, rel in entries.items():
            arr = nx.load_tensor(d / rel)
            ref = model.params[name]
            # snapshots pad shapes to 4-D, so compare element counts
            if arr.size != ref.size:
                raise ValueError(f"{d / rel}: shape {arr.shape}, model expects {ref.shape}")
            loaded[group][name] = arr.reshape(ref.shape).astype(ref.dtype)
    model.set_params(loaded["params"])
    est.ema_state_ = nx.EmaState(loaded["ema"], manifest["ema_decay"])
    o = manifest["optimizer"]
    est.optim_state_ = nx.OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                                     step=o["step"], m=loaded["adam_m"], v=loaded["adam_v"])
    est.n_iter_ = int(manifest["step"])
    return est
