"""Run configuration: every tunable across the stack with its default,
nested per subsystem, plus flat-key (dotted) access for file loading and
command-line overrides."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .memory import MemoryConfig
from .planner import DynamicLimits, PlannerConfig
from .verifier import VerifierConfig


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 48
    fov_x: float = math.pi / 2.0

    def intrinsics(self):
        from .geometry import CameraIntrinsics

        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_x)


@dataclass
class AgentConfig:
    decision_period: float = 0.5
    monitoring_period: float = 2.0
    k_stable: int = 2
    pixel_noise_sigma: float = 0.0
    dual_agent: bool = True
    monitor_base_cost: float = 0.08
    monitor_tokens_per_second: float = 3000.0


@dataclass
class SimConfig:
    uav_radius: float = 0.3
    stop_radius: float = 5.0
    physics_dt: float = 0.05
    max_render_range: float = 30.0
    feature_noise_sigma: float = 0.05
    oracle_margin: float = 0.3
    lost_divergence: float = 2.0 * math.pi / 3.0
    lost_checks: int = 3
    lost_min_motion: float = 0.2
    recovery_yaw_tolerance: float = 0.05


@dataclass
class RunConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    limits: DynamicLimits = field(default_factory=DynamicLimits)
    agents: AgentConfig = field(default_factory=AgentConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    memory_policy: str = "hybrid"
    verifier_enabled: bool = True
    planner_enabled: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.memory_policy not in ("hybrid", "sliding", "time_sampling"):
            raise ConfigError(f"unknown memory policy {self.memory_policy!r}")
        if self.agents.dual_agent and not (
            self.agents.decision_period < self.agents.monitoring_period
        ):
            raise ConfigError("decision period must be shorter than monitoring period")
        if self.sim.physics_dt <= 0 or self.agents.decision_period <= 0:
            raise ConfigError("periods must be positive")
        ratio = self.agents.decision_period / self.sim.physics_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("decision period must be a multiple of physics_dt")
        ratio = self.agents.monitoring_period / self.sim.physics_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("monitoring period must be a multiple of physics_dt")

    # -- flat-key access ----------------------------------------------------

    _SECTIONS = (
        "camera", "memory", "verifier", "planner", "limits", "agents", "sim",
    )

    def to_flat(self) -> dict:
        flat: dict = {}
        for section in self._SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if isinstance(value, tuple):
                    value = list(value)
                flat[f"{section}.{f.name}"] = value
        flat["memory_policy"] = self.memory_policy
        flat["verifier_enabled"] = self.verifier_enabled
        flat["planner_enabled"] = self.planner_enabled
        flat["seed"] = self.seed
        return flat

    def apply_flat(self, overrides: dict) -> "RunConfig":
        for key, value in overrides.items():
            self._set_flat(key, value)
        self.validate()
        return self

    def _set_flat(self, key: str, value) -> None:
        if "." not in key:
            if not hasattr(self, key):
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, key)
            setattr(self, key, _coerce(key, value, current))
            return
        section, name = key.split(".", 1)
        if section not in self._SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        obj = getattr(self, section)
        if not hasattr(obj, name):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        setattr(obj, name, _coerce(key, value, current))


def _coerce(key: str, value, current):
    """Parse an override (possibly a CLI string) to the field's type."""
    if isinstance(value, str):
        text = value.strip()
        if isinstance(current, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if isinstance(current, int) and not isinstance(current, bool):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(current, float):
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(current, tuple):
            try:
                parts = [float(p) for p in text.replace(",", " ").split()]
            except ValueError:
                raise ConfigError(f"{key}: expected numbers, got {value!r}") from None
            return tuple(parts)
        return text
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    raise ConfigError(f"{key}: cannot assign {value!r}")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a config from defaults, an optional JSON file of flat keys, and
    explicit overrides (last writer wins)."""
    config = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p}: expected a JSON object of flat keys")
        config.apply_flat(data)
    if overrides:
        config.apply_flat(overrides)
    config.validate()
    return config


def dump_config(config: RunConfig, path: str | Path) -> None:
    """Write the effective flat config (the round-trip echo)."""
    Path(path).write_text(
        json.dumps(config.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
