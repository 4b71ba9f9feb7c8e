"""Run configuration: nested dataclasses with JSON round-trip and content hashes.

A config file is a partial JSON object; every omitted field keeps its
default. Unknown fields and out-of-range values raise ``ConfigError`` with
the dotted path of the offending field.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import jsonio
from .dataset import DatasetConfig
from .pseudomask import SELECTORS
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalOptions:
    threshold: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grid: str = "standard"  # standard | factorial
    maskbench_trials: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    selector: str = "weighted"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def eps(self) -> float:
        return self.train.hyper.eps

    def dataset_hash(self) -> str:
        return jsonio.content_hash({"seed": self.seed, "dataset": dataclasses.asdict(self.dataset)})

    def pseudo_hash(self, data_hash: str) -> str:
        return jsonio.content_hash({"data": data_hash, "selector": self.selector, "eps": self.eps})


# (dotted path) -> (low, high), inclusive; None leaves a side open
RANGES = {
    "seed": (0, None),
    "dataset.scene.n_objects": (2, 12),
    "dataset.scene.gaussians_per_object": (1, None),
    "dataset.scene.n_background": (0, None),
    "dataset.scene.d_r": (1, None),
    "dataset.cameras.n": (2, None),
    "dataset.cameras.width": (8, 1024),
    "dataset.cameras.height": (8, 1024),
    "dataset.cameras.split_ratio": (0.0, 1.0),
    "dataset.cameras.fov_deg": (1.0, 170.0),
    "dataset.grammar.per_object": (1, None),
    "dataset.grammar.relation_fraction": (0.0, 1.0),
    "dataset.corruption.k": (1, None),
    "dataset.corruption.blob_rate": (0.0, 1.0),
    "dataset.corruption.wrong_object_rate": (0.0, 1.0),
    "train.hyper.lam": (0.0, None),
    "train.hyper.eps": (0.0, 0.999999),
    "train.hyper.iterations": (0, None),
    "train.d_r": (1, None),
    "train.dim": (1, None),
    "eval.maskbench_trials": (1, None),
}
CHOICES = {
    "selector": tuple(SELECTORS),
    "train.similarity": ("multiplication", "cosine"),
    "eval.grid": ("standard", "factorial"),
    "dataset.grammar.test_pool": ("plain", "any"),
}


def _check_scalar(path: str, value):
    if path in RANGES:
        lo, hi = RANGES[path]
        if (lo is not None and value < lo) or (hi is not None and value > hi):
            raise ConfigError(f"{path} = {value!r} is outside the range [{lo}, {'inf' if hi is None else hi}]")
    if path in CHOICES and value not in CHOICES[path]:
        raise ConfigError(f"{path} = {value!r}; expected one of {list(CHOICES[path])}")


def _coerce(path: str, tp, value, default):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be an object")
        return _build(tp, value, default, path + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        if default is not None and len(value) != len(default) and origin is tuple:
            raise ConfigError(f"{path} must have {len(default)} entries")
        (inner, *_) = typing.get_args(tp) or (float,)
        items = [_coerce(f"{path}[{i}]", inner, v, None) for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    return value


def _build(cls, data: dict, base, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config field {prefix + key!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = prefix + f.name
        current = getattr(base, f.name)
        if f.name in data:
            value = _coerce(path, hints[f.name], data[f.name], current)
        else:
            value = current
        if not dataclasses.is_dataclass(value):
            _check_scalar(path, value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return _build(RunConfig, data, RunConfig())


def load_config(path) -> RunConfig:
    return config_from_dict(jsonio.load(Path(path)))
