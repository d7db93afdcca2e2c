"""Declarative run configuration: one JSON document covering every stage.

A RunConfig bundles the network, training (with augmentation and crop
curriculum) and phantom-generation settings. Every CLI run writes its fully
resolved configuration next to its outputs so results can be reproduced
bit-for-bit from that file alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Union

from .augment import AugmentConfig, CurriculumSchedule
from .errors import ConfigurationError, FormatError
from .network import NetworkConfig
from .synthgen import PhantomSpec
from .train import TrainConfig


def _from_mapping(cls, data: Mapping, converters: dict[str, Callable] | None = None):
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{cls.__name__} section must be an object, got {type(data).__name__}")
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {unknown}")
    converters = converters or {}
    kwargs = {k: converters[k](v) if k in converters else v for k, v in data.items()}
    return cls(**kwargs)


def _pair(v):
    return (v[0], v[1])


def _triple(v):
    return (v[0], v[1], v[2])


def augment_config_from_dict(d: Mapping) -> AugmentConfig:
    return _from_mapping(
        AugmentConfig, d,
        {"rotation_deg": _pair, "zoom_range": _pair, "gamma_range": _pair},
    )


def curriculum_from_dict(d: Mapping) -> CurriculumSchedule:
    return _from_mapping(
        CurriculumSchedule, d,
        {"stages": lambda v: [(int(s), int(e)) for s, e in v]},
    )


def train_config_from_dict(d: Mapping) -> TrainConfig:
    return _from_mapping(
        TrainConfig, d,
        {"curriculum": curriculum_from_dict, "augment": augment_config_from_dict},
    )


def phantom_spec_from_dict(d: Mapping) -> PhantomSpec:
    return _from_mapping(
        PhantomSpec, d,
        {
            "dims": _triple,
            "spacing": _triple,
            "blob_radius_xy": _pair,
            "blob_radius_z": _pair,
            "n_tubes": lambda v: (int(v[0]), int(v[1])),
            "tube_radius": _pair,
            "tube_length": _pair,
            "fg_level": _pair,
            "contrast_gamma": _pair,
        },
    )


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def to_json_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": dataclasses.asdict(self.train),
            "phantom": dataclasses.asdict(self.phantom),
        }

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigurationError("run config must be a JSON object")
        unknown = sorted(set(d) - {"network", "train", "phantom"})
        if unknown:
            raise ConfigurationError(f"unknown run config sections: {unknown}")
        return cls(
            network=NetworkConfig.from_dict(d.get("network", {})),
            train=train_config_from_dict(d.get("train", {})),
            phantom=phantom_spec_from_dict(d.get("phantom", {})),
        )


def load_run_config(path: Union[str, Path]) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: config is not valid JSON ({e})") from e
    return RunConfig.from_json_dict(data)


def write_resolved_config(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Persist the exact configuration a run used (deterministic bytes)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return path
