"""Flat ``key=value`` configuration files.

One setting per line; blank lines and ``#`` comments are ignored. Keys:

Training
    variant, lambda, learning_rate, batch, window, epochs, max_iterations,
    beta1, beta2, eps, clip_norm, use_density_loss, count_target, patience,
    restore_best, augment, flip_prob, crop_prob, crop_min, brightness,
    contrast (two comma-separated numbers), seed
Model
    base_channels, atrous_layers, atrous_rate, hidden, layers,
    lstm_input_downsample, model_seed
Synthetic data (gen-data)
    height, width, frames, sequences, arrival_rate, speed_range,
    perspective_ratio, lanes, car_size, oversize_size, oversize_prob,
    occlusion, noise, background, intensity_range, band, degrade_prob,
    degrade_contrast, split, data_seed,
    kappa, shuffle

Pairs and triples (``speed_range``, ``split`` ...) are comma-separated;
``band=none`` means the whole frame.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .errors import FormatError, InvalidArgumentError
from .fcn import FCNConfig
from .synthdata import SceneConfig
from .training import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(n):
    def parse(s: str):
        parts = [float(p) for p in s.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers, got {s!r}")
        return tuple(parts)
    return parse


def _band(s: str):
    if s.strip().lower() == "none":
        return None
    lo, hi = (int(p) for p in s.split(","))
    return (lo, hi)


# key: (section, field name, parser)
KEYS = {
    "variant": ("train", "variant", str),
    "lambda": ("train", "lam", float),
    "learning_rate": ("train", "learning_rate", float),
    "batch": ("train", "batch", int),
    "window": ("train", "unroll", int),
    "epochs": ("train", "epochs", int),
    "max_iterations": ("train", "max_iterations", int),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "eps": ("train", "eps", float),
    "clip_norm": ("train", "clip_norm", float),
    "use_density_loss": ("train", "use_density_loss", _bool),
    "count_target": ("train", "count_target", str),
    "patience": ("train", "patience", int),
    "restore_best": ("train", "restore_best", _bool),
    "augment": ("train", "augment", _bool),
    "flip_prob": ("train", "flip_prob", float),
    "crop_prob": ("train", "crop_prob", float),
    "crop_min": ("train", "crop_min", float),
    "brightness": ("train", "brightness", float),
    "contrast": ("train", "contrast", _floats(2)),
    "seed": ("train", "seed", int),
    "base_channels": ("model", "base_channels", int),
    "atrous_layers": ("model", "atrous_layers", int),
    "atrous_rate": ("model", "atrous_rate", int),
    "hidden": ("model", "hidden", int),
    "layers": ("model", "lstm_layers", int),
    "lstm_input_downsample": ("model", "lstm_input_downsample", int),
    "model_seed": ("model", "seed", int),
    "height": ("scene", "height", int),
    "width": ("scene", "width", int),
    "frames": ("scene", "frames", int),
    "arrival_rate": ("scene", "arrival_rate", float),
    "speed_range": ("scene", "speed_range", _floats(2)),
    "perspective_ratio": ("scene", "perspective_ratio", float),
    "lanes": ("scene", "lanes", int),
    "car_size": ("scene", "car_size", _floats(2)),
    "oversize_size": ("scene", "oversize_size", _floats(2)),
    "oversize_prob": ("scene", "oversize_prob", float),
    "occlusion": ("scene", "occlusion", _bool),
    "noise": ("scene", "noise", float),
    "background": ("scene", "background", float),
    "intensity_range": ("scene", "intensity_range", _floats(2)),
    "band": ("scene", "band", _band),
    "degrade_prob": ("scene", "degrade_prob", float),
    "degrade_contrast": ("scene", "degrade_contrast", _floats(2)),
    "sequences": ("data", "sequences", int),
    "split": ("data", "split", _floats(3)),
    "data_seed": ("data", "data_seed", int),
    "kappa": ("data", "kappa", float),
    "shuffle": ("data", "shuffle", _bool),
}

MODEL_DEFAULTS = {"hidden": 100, "lstm_layers": 3, "lstm_input_downsample": 1, "seed": 0}
DATA_DEFAULTS = {"sequences": 50, "split": (0.7, 0.15, 0.15), "data_seed": 0, "kappa": 0.25, "shuffle": False}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; later lines override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def typed(raw: dict[str, str]) -> dict[str, dict]:
    """Group and convert raw settings by section; unknown keys are rejected."""
    sections: dict[str, dict] = {"train": {}, "model": {}, "scene": {}, "data": {}}
    for key, value in raw.items():
        if key not in KEYS:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad value for {key}: {exc}") from exc
    return sections


def train_config(sections: dict, **overrides) -> TrainConfig:
    return replace(TrainConfig(**sections["train"]), **overrides)


def fcn_config(sections: dict) -> FCNConfig:
    m = sections["model"]
    keys = ("base_channels", "atrous_layers", "atrous_rate")
    return FCNConfig(**{k: m[k] for k in keys if k in m})


def model_options(sections: dict) -> dict:
    m = sections["model"]
    return {k: m.get(k, v) for k, v in MODEL_DEFAULTS.items()}


def scene_config(sections: dict) -> SceneConfig:
    return SceneConfig(**sections["scene"])


def data_options(sections: dict) -> dict:
    return {**DATA_DEFAULTS, **sections["data"]}
