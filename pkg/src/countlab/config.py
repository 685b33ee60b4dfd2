"""Run configuration: strict JSON files plus flag overrides."""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class PathsConfig:
    mnist_dir: str | None = None
    frames_dir: str | None = None
    roi: str | None = None
    out: str = "out"


@dataclass
class GenConfig:
    n_train: int = 50000
    n_test: int = 5000
    n_singles_train: int = 5000
    n_singles_test: int = 2000
    max_digits: int = 5
    min_center_dist: float = 28.0
    # pedestrian side
    max_count: int = 25
    feather: float = 2.0
    scene_h: int = 158
    scene_w: int = 238
    n_sprites: int = 200
    subtract_threshold: float = 0.1
    morph_radius: int = 1
    background_sigma: float = 1.0


@dataclass
class TrainSettings:
    iterations: int = 20000
    batch_size: int = 32
    lr: float = 1e-2
    lr_halving_steps: int = 3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_interval: int = 500
    eval_subset: int = 1000
    use_lrn: bool = True


@dataclass
class ProbeSettings:
    c_grid: list = field(default_factory=lambda: [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3])
    gamma_grid: list = field(default_factory=lambda: [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2])
    folds: int = 3
    kernel: str = "rbf"
    max_dims: int = 4000
    n_train: int = 5000
    n_test: int = 2000


@dataclass
class VizSettings:
    k: int = 128
    lam: float = 0.001
    taps: list = field(default_factory=lambda: ["pool2", "pool1"])
    n_positive: int = 100
    n_negative: int = 100
    pixels_per_image: int = 300
    n_overlays: int = 8


@dataclass
class RunConfig:
    task: str = "digits"
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    viz: VizSettings = field(default_factory=VizSettings)


_NUMERIC = (int, float)


def _fill(cls, data, prefix=""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if key in _SECTIONS and cls is RunConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix + key!r} must be an object")
            kwargs[key] = _fill(_SECTIONS[key], value, prefix + key + ".")
        else:
            kwargs[key] = _check_type(prefix + key, value, fields[key])
    return cls(**kwargs)


_SECTIONS = {"paths": PathsConfig, "gen": GenConfig, "train": TrainSettings,
             "probe": ProbeSettings, "viz": VizSettings}


def _check_type(name, value, f):
    default = f.default if f.default is not dataclasses.MISSING else (
        f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} must be a boolean")
    elif isinstance(default, _NUMERIC):
        if isinstance(value, bool) or not isinstance(value, _NUMERIC):
            raise ConfigError(f"config key {name!r} must be a number")
        value = type(default)(value)
    elif isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"config key {name!r} must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key {name!r} must be a list")
    return value


def parse_config(path=None, overrides=None) -> RunConfig:
    """Load a strict-schema JSON config; flag overrides win over file values."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _fill(RunConfig, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        target = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            target = getattr(target, part)
        if not hasattr(target, parts[-1]):
            raise ConfigError(f"unknown override {dotted!r}")
        setattr(target, parts[-1], value)
    return cfg
