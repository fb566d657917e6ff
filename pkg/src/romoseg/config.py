"""Run configuration: defaults, JSON loading and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

REFINEMENT_MODES = ("none", "morphological", "external")
_MODE_ALIASES = {"morph": "morphological", "off": "none"}


@dataclass(frozen=True)
class RunConfig:
    # pseudo-label thresholds, as multiples of the per-frame mean flow norm
    theta_l_mult: float = 0.01
    theta_u_mult: float = 2.0
    iterations: int = 2
    hidden: tuple[int, ...] = (8,)
    lr: float = 0.02
    epochs: int = 25
    tau2: float = 0.01
    lipschitz_weight: float = 1e-6
    cycle_tol: float = 1.0
    drop_threshold: float = 0.5
    trials: int = 512
    inlier_scale: float = 2.5
    classical_sampson: bool = False
    flow_norm_valid_only: bool = False
    refinement_mode: str = "morphological"
    refinement_command: str | None = None
    min_component_frac: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.refinement_mode, self.refinement_mode)
        object.__setattr__(self, "refinement_mode", mode)
        object.__setattr__(self, "hidden", tuple(self.hidden))
        self.validate()

    def validate(self) -> None:
        positive = ("theta_l_mult", "theta_u_mult", "lr", "tau2", "cycle_tol",
                    "drop_threshold", "inlier_scale", "min_component_frac")
        for name in positive:
            value = getattr(self, name)
            if not value > 0:
                raise ConfigError(name, f"must be > 0, got {value!r}")
        if not self.theta_l_mult < self.theta_u_mult:
            raise ConfigError("theta_l_mult", "must be smaller than theta_u_mult")
        for name in ("iterations", "epochs", "trials"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.drop_threshold > 1:
            raise ConfigError("drop_threshold", "is a fraction and must be <= 1")
        if self.lipschitz_weight < 0:
            raise ConfigError("lipschitz_weight", "must be >= 0")
        if not self.hidden or any(n < 1 for n in self.hidden):
            raise ConfigError("hidden", "needs at least one layer of positive width")
        if self.refinement_mode not in REFINEMENT_MODES:
            raise ConfigError("refinement_mode",
                              f"must be one of {REFINEMENT_MODES}, got {self.refinement_mode!r}")
        if self.refinement_mode == "external" and not self.refinement_command:
            raise ConfigError("refinement_command", "required when refinement_mode is external")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in d.items():
        name = f"{prefix}_{key}" if prefix else str(key)
        if isinstance(value, dict):
            out.update(_flatten(value, name))
        else:
            out[name] = value
    return out


def _canonical_key(key: str) -> str:
    return key.strip().replace(".", "_").replace("-", "_")


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if name == "hidden":
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(name, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if name == "refinement_command":
        if value is not None and not isinstance(value, str):
            raise ConfigError(name, "expected a string")
        return value
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Build a config from a (possibly nested) mapping; unknown keys are rejected."""
    values = {}
    for key, value in _flatten(data).items():
        name = _canonical_key(key)
        if name not in _FIELDS:
            raise ConfigError(key, "unknown configuration key")
        values[name] = _coerce(name, value)
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return config_from_dict(data)


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    pairs = dict(parse_override(item) for item in overrides)
    if not pairs:
        return cfg
    return config_from_dict(pairs, base=cfg)
