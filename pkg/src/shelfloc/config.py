"""Pipeline configuration: a TOML tree of sections with defaults, profiles and overrides.

Every section maps onto the dataclasses owned by the individual modules;
this file only knows how to read, merge, validate and translate.
"""

from __future__ import annotations

import copy
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .data_model import ClassCatalog, InvalidInputError
from .evaluation import EvalConfig
from .fcn import TINY_STAGES, VGG11_STAGES, FcnConfig
from .postprocess import DEFAULT_ASPECT_RATIOS, DEFAULT_SCALES, DetectParams
from .pyramid import PyramidConfig
from .refine import ConvAeConfig, RefineHyperparams
from .synth import SynthConfig
from .training import TrainingHyperparams

CONFIG_ENV = "SHELFLOC_CONFIG"
BACKBONES = {"vgg11": VGG11_STAGES, "tiny": TINY_STAGES}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {"manifest": "", "test_split": "test"},
    "fcn": {
        "final_kernel": [2, 4],
        "backbone": "vgg11",
        "use_pretrained_backbone": False,
        "pretrained_path": "",
        "learning_rate": 1e-3,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "patience": 30,
        "batch_size": 32,
        "max_epochs": 300,
        "grad_clip": 0.0,
        "augment_flip": False,
        "augment_scale": 0.0,
        "val_fraction": 0.2,
        "background_patches": 0,
        "background_patch_max_iou": 0.0,
        "background_patch_jitter": 0.0,
    },
    "synth": {
        "samples": 100,
        "background_mode": "pool",
        "canvas_small_hw": [1200, 2000],
        "canvas_large_hw": [2000, 3000],
        "large_canvas_min_rows": 4,
        "rows_range": [2, 5],
        "columns_range": [3, 12],
        "scale_range": [0.5, 1.1],
        "jitter": 0.3,
        "start_offset": 0.05,
        "board_fraction": 0.05,
    },
    "refine": {
        "filters": [16, 24, 32],
        "working_resolution": [],
        "learning_rate": 1e-3,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "patience": 5,
        "batch_size": 8,
        "max_epochs": 100,
        "grad_clip": 0.0,
        "val_fraction": 0.2,
    },
    "detect": {
        "threshold": 0.5,
        "class_thresholds": {},
        "connectivity": 8,
        "min_area_fraction": 1e-4,
        "downscale": 1.5,
        "max_levels": 10,
        "interpolation": "bilinear",
    },
    "baseline": {
        "scales": list(DEFAULT_SCALES),
        "aspect_ratios": list(DEFAULT_ASPECT_RATIOS),
        "stride": 0.25,
        "score_threshold": 0.5,
        "nms_iou": 0.3,
    },
    "eval": {"iou_threshold": 0.1},
    "sweep": {"thresholds": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
}
# sections whose components take a seed; an explicit per-section seed wins over the global one
SEEDED = ("fcn", "synth", "refine")
# tables whose keys are free-form (class names) rather than a fixed schema
FREE_FORM = {("detect", "class_thresholds")}


class ConfigError(ValueError):
    pass


def profile_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("shelfloc.profiles").iterdir() if p.name.endswith(".toml"))


def _read_toml(source: str) -> dict:
    path = Path(source)
    if path.is_file():
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    if source in profile_names():
        return tomllib.loads(resources.files("shelfloc.profiles").joinpath(f"{source}.toml").read_text())
    raise ConfigError(f"config file not found: {source} (bundled profiles: {', '.join(profile_names())})")


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    for key, value in update.items():
        where = path + (key,)
        if key not in base and not (len(path) == 1 and key == "seed" and path[0] in SEEDED):
            raise ConfigError(f"unknown config key {'.'.join(where)}")
        if isinstance(base.get(key), dict) and where not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(where)} must be a table")
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def parse_override(text: str) -> dict:
    """``section.key=value`` into a nested dict; the value is parsed as TOML, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    keys = [k.strip() for k in dotted.split(".") if k.strip()]
    if not keys:
        raise ConfigError(f"override {text!r} has no key")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: dict = {}
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def load_config(source: str | None = None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the config file (or ``$SHELFLOC_CONFIG``), then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    source = source or os.environ.get(CONFIG_ENV)
    if source:
        _merge(cfg, _read_toml(source))
    for text in overrides:
        _merge(cfg, parse_override(text))
    for section in SEEDED:
        cfg[section].setdefault("seed", cfg["seed"])
    return cfg


def dump_config(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def _pair(value, name) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a two-element list, got {value!r}")
    return tuple(value)


def _backbone(value) -> tuple:
    if isinstance(value, str):
        if value not in BACKBONES:
            raise ConfigError(f"unknown backbone {value!r}; use one of {sorted(BACKBONES)} or a stage list")
        return BACKBONES[value]
    return tuple(value)


def _wrap(fn):
    try:
        return fn()
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(str(exc)) from None


def fcn_config(cfg: dict, catalog: ClassCatalog) -> FcnConfig:
    s = cfg["fcn"]
    return _wrap(
        lambda: FcnConfig(
            num_classes=len(catalog.names),
            include_background=catalog.background_id is not None,
            final_kernel=_pair(s["final_kernel"], "fcn.final_kernel"),
            backbone=_backbone(s["backbone"]),
            use_pretrained_backbone=bool(s["use_pretrained_backbone"]),
            pretrained_path=s["pretrained_path"] or None,
            seed=int(s["seed"]),
        )
    )


_HP_KEYS = ("learning_rate", "momentum", "weight_decay", "patience", "batch_size", "max_epochs", "grad_clip")


def fcn_hparams(cfg: dict) -> TrainingHyperparams:
    s = cfg["fcn"]
    return _wrap(
        lambda: TrainingHyperparams(
            **{k: s[k] for k in _HP_KEYS},
            seed=int(s["seed"]),
            augment_flip=bool(s["augment_flip"]),
            augment_scale=float(s["augment_scale"]),
        )
    )


def convae_config(cfg: dict, channels: int) -> ConvAeConfig:
    s = cfg["refine"]
    return _wrap(lambda: ConvAeConfig(in_channels=channels, filters=tuple(s["filters"]), seed=int(s["seed"])))


def refine_hparams(cfg: dict) -> RefineHyperparams:
    s = cfg["refine"]
    return _wrap(
        lambda: RefineHyperparams(**{k: s[k] for k in _HP_KEYS}, seed=int(s["seed"]), val_fraction=float(s["val_fraction"]))
    )


def detect_params(cfg: dict, catalog: ClassCatalog, threshold: float | None = None) -> DetectParams:
    s = cfg["detect"]
    try:
        per_class = {catalog.class_id(k): float(v) for k, v in s["class_thresholds"].items()}
    except InvalidInputError as exc:
        raise ConfigError(f"detect.class_thresholds: {exc}") from None
    return _wrap(
        lambda: DetectParams(
            threshold=float(s["threshold"] if threshold is None else threshold),
            class_thresholds=per_class,
            connectivity=int(s["connectivity"]),
            min_area_fraction=float(s["min_area_fraction"]),
        )
    )


def pyramid_config(cfg: dict, training_input_hw) -> PyramidConfig:
    s = cfg["detect"]
    return _wrap(
        lambda: PyramidConfig(
            downscale=float(s["downscale"]),
            min_hw=tuple(training_input_hw),
            max_levels=int(s["max_levels"]),
            interpolation=s["interpolation"],
        )
    )


def eval_config(cfg: dict) -> EvalConfig:
    return _wrap(lambda: EvalConfig(float(cfg["eval"]["iou_threshold"])))


def synth_config(cfg: dict, catalog: ClassCatalog, product_pool, background_pool=()) -> SynthConfig:
    s = cfg["synth"]
    return _wrap(
        lambda: SynthConfig(
            catalog=catalog,
            product_pool=product_pool,
            background_pool=list(background_pool),
            background_mode=s["background_mode"],
            canvas_small_hw=_pair(s["canvas_small_hw"], "synth.canvas_small_hw"),
            canvas_large_hw=_pair(s["canvas_large_hw"], "synth.canvas_large_hw"),
            large_canvas_min_rows=int(s["large_canvas_min_rows"]),
            rows_range=_pair(s["rows_range"], "synth.rows_range"),
            columns_range=_pair(s["columns_range"], "synth.columns_range"),
            scale_range=_pair(s["scale_range"], "synth.scale_range"),
            jitter=float(s["jitter"]),
            start_offset=float(s["start_offset"]),
            board_fraction=float(s["board_fraction"]),
            samples=int(s["samples"]),
            seed=int(s["seed"]),
        )
    )
