"""Training configuration: dataclass schema, JSON round-trip, overrides."""

import dataclasses
import json
from dataclasses import dataclass, field

from .ess import EssConfig
from .rdr import RdrConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 6000
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 1
    init_primitives: int = 2000

    # learning rates; position is multiplied by scene extent and decays
    # exponentially from lr_means_init to lr_means_final over the run
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3

    # densification & pruning
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 4500
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 5e-3
    opacity_reset_interval: int = 3000
    densify_enabled: bool = True

    lambda_depth: float = 0.0
    eval_interval: int = 1000

    rdr: RdrConfig = field(default_factory=RdrConfig)
    ess: EssConfig = field(default_factory=EssConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        for name in ("densify_interval", "opacity_reset_interval",
                     "eval_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.background) != 3:
            raise ConfigError("background must have 3 channels")
        if self.lambda_depth < 0:
            raise ConfigError("lambda_depth must be non-negative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "rdr" in d and isinstance(d["rdr"], dict):
            d["rdr"] = RdrConfig(**d["rdr"])
        if "ess" in d and isinstance(d["ess"], dict):
            d["ess"] = EssConfig(**d["ess"])
        if "background" in d:
            d["background"] = tuple(float(c) for c in d["background"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Apply dotted-key overrides, e.g. {"rdr.rate": 0.4}."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = d
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key: {key}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key: {key}")
            node[parts[-1]] = value
        return TrainConfig.from_dict(d)
