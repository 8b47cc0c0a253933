"""JSON run configuration: nested sections mapped onto ``CSPDetector`` params.

A config file may omit any key; omitted keys take the toy-preset defaults
shipped in ``configs/toy.json``.  Unknown keys are rejected so typos do not
silently fall back to defaults.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .codec import CodecConfig
from .data import AugmentParams, SceneSpec
from .estimator import CSPDetector
from .loss import LossConfig
from .network import ModelConfig

SEED_ENV = "CSP_SEED"


class ConfigError(ValueError):
    """Invalid or unreadable run configuration (CLI exit code 2)."""


_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "seed"]
_AUG_KEYS = [f.name for f in fields(AugmentParams) if f.name not in ("seed", "pad_value")]


def _default_sections() -> dict:
    est = CSPDetector()
    return {
        "seed": 0,
        "output_dir": "runs/toy",
        "model": {k: v for k, v in asdict(est.model_config()).items() if k in _MODEL_KEYS},
        "codec": asdict(est.codec_config()),
        "loss": asdict(est.loss_config()),
        "optimizer": {"lr": est.learning_rate, "lr_schedule": est.lr_schedule,
                      "batch_size": est.batch_size,
                      "iterations": est.n_iter, "ema_decay": est.ema_decay,
                      "checkpoint_every": 500, "log_every": 1},
        "inference": {"aspect_ratio": est.aspect_ratio, "nms_thresh": est.nms_threshold,
                      "use_ema": est.use_ema},
        "data": {"train": asdict(SceneSpec()), "n_train": 1000,
                 "val": {"n": 100, "seed": 12345}, "center_jitter": 0.0,
                 "annotations": None},
        "augment": {k: v for k, v in asdict(est.augment_params()).items() if k in _AUG_KEYS},
    }


DEFAULTS = _default_sections()


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        self.validate()

    # --- accessors -----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.sections["seed"])

    @property
    def output_dir(self) -> Path:
        p = Path(self.sections["output_dir"])
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    @property
    def optimizer(self) -> dict:
        return self.sections["optimizer"]

    @property
    def data(self) -> dict:
        return self.sections["data"]

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(**self.sections["data"]["train"])

    def annotations_path(self) -> Optional[Path]:
        p = self.sections["data"]["annotations"]
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self):
        s = self.sections
        try:
            ModelConfig(**s["model"], seed=self.seed)
            CodecConfig(**s["codec"])
            LossConfig(**s["loss"])
            AugmentParams(**s["augment"])
            SceneSpec(**s["data"]["train"])
        except (TypeError, ValueError, NotImplementedError) as exc:
            raise ConfigError(str(exc)) from None
        for key in ("r", "scale_mode", "offset_enabled"):
            if s["model"][key] != s["codec"][key]:
                raise ConfigError(f"model.{key}={s['model'][key]!r} disagrees with "
                                  f"codec.{key}={s['codec'][key]!r}")
        opt = s["optimizer"]
        if not (opt["lr"] >= 0 and opt["batch_size"] >= 1 and opt["iterations"] >= 0
                and 0 <= opt["ema_decay"] < 1 and opt["checkpoint_every"] >= 1):
            raise ConfigError(f"invalid optimizer section {opt}")
        if opt["lr_schedule"] not in ("constant", "cosine"):
            raise ConfigError(f"optimizer.lr_schedule must be 'constant' or 'cosine', "
                              f"got {opt['lr_schedule']!r}")
        if s["data"]["n_train"] < 1 or s["data"]["val"]["n"] < 0:
            raise ConfigError("data.n_train must be >= 1 and data.val.n >= 0")
        ann = self.annotations_path()
        if ann is not None and not ann.is_file():
            raise ConfigError(f"annotation file {ann} does not exist")

    # --- conversion ------------------------------------------------------------

    def estimator_params(self) -> dict:
        s = self.sections
        m, c, lo, a = s["model"], s["codec"], s["loss"], s["augment"]
        opt, inf = s["optimizer"], s["inference"]
        return dict(
            r=m["r"], scale_mode=m["scale_mode"], offset=m["offset_enabled"],
            aspect_ratio=inf["aspect_ratio"], stage_channels=tuple(m["stage_channels"]),
            stages_fused=tuple(m["stages_fused"]), head_channels=m["head_channels"],
            dilate_last_stage=m["dilate_last_stage"], scale_bias_init=m["scale_bias_init"],
            dtype=m["dtype"], neighbor_radius=c["neighbor_radius"], sigma_ratio=c["sigma_ratio"],
            scale_on_neighbors=c["scale_on_neighbors"], gamma=lo["gamma"], beta=lo["beta"],
            lambda_c=lo["lambda_c"], lambda_s=lo["lambda_s"], lambda_o=lo["lambda_o"],
            smooth_l1_delta=lo["smooth_l1_delta"], learning_rate=opt["lr"],
            lr_schedule=opt["lr_schedule"],
            batch_size=opt["batch_size"], n_iter=opt["iterations"], ema_decay=opt["ema_decay"],
            hflip_prob=a["hflip_prob"], scale_range=tuple(a["scale_range"]),
            crop_size=None if a["crop_size"] is None else tuple(a["crop_size"]),
            brightness_jitter=a["brightness_jitter"], center_jitter=s["data"]["center_jitter"],
            decode_threshold=c["decode_threshold"], nms_threshold=inf["nms_thresh"],
            use_ema=inf["use_ema"], random_state=self.seed,
        )

    def make_estimator(self, **overrides) -> CSPDetector:
        params = self.estimator_params()
        params.update(overrides)
        return CSPDetector(**params)

    def replace(self, overrides: dict) -> "RunConfig":
        """Copy with a nested override dict merged in."""
        return RunConfig(_merge(self.sections, overrides), self.base_dir)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.sections, indent=2) + "\n")


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """Read a JSON config (or the defaults when ``path`` is None).

    The ``CSP_SEED`` environment variable, when set, replaces ``seed``.
    """
    env = os.environ if env is None else env
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        base = path.parent.resolve()
    merged = _merge(DEFAULTS, raw)
    if overrides:
        merged = _merge(merged, overrides)
    if env.get(SEED_ENV):
        try:
            merged["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig(merged, base)
