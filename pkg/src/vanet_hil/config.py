"""Scenario configuration: dataclass defaults plus ini-style sectioned overrides.

Example::

    [scenario]
    densities = 1, 2, 3, 5, 7, 10
    sim_time = 250
    application = probe

    [mac]
    queue_limit = 50

    [radio]
    coverage_range = 180
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agent import AgentConfig
from .kernel import DEFAULT_DRIFT_BUDGET_US
from .mobility import KinematicsConfig
from .radio import MacConfig, RadioConfig
from .traffic import BACKGROUND_INTERVAL, BACKGROUND_SIZE, PROBE_PACKET_SIZE, PROBE_RATE

APPLICATIONS = ("probe", "lidar", "video")
MODES = ("virtual", "realtime")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficConfig:
    probe_rate: float = PROBE_RATE
    probe_packet_size: int = PROBE_PACKET_SIZE
    lidar_rate_hz: float = 10.0
    lidar_points: int = 3600
    lidar_fragment: int = 1400
    lidar_capture: str = ""
    video_chunk_interval: float = 0.04
    video_bitrate: float = 2e6
    video_file: str = ""
    background_size: int = BACKGROUND_SIZE
    background_interval: float = BACKGROUND_INTERVAL


@dataclass(frozen=True)
class GatewayConfig:
    host: str = "127.0.0.1"
    vehicle_port: int = 50_520
    vehicle_peer_port: int = 50_521
    server_port: int = 50_320
    server_peer_port: int = 50_321


@dataclass(frozen=True)
class ScenarioConfig:
    densities: tuple[int, ...] = (1, 2, 3, 5, 7, 10)
    episodes: int = 3
    sim_time: float = 250.0
    mode: str = "virtual"
    rl_enabled: bool = False
    seed: int = 1
    application: str = "probe"
    drift_budget_us: int = DEFAULT_DRIFT_BUDGET_US
    # route probe frames through the MAC with zero contention for lossless checks
    ideal_channel: bool = False
    qtable_load: str = ""
    qtable_save: str = ""
    freeze: bool = False
    radio: RadioConfig = field(default_factory=RadioConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)

    def __post_init__(self):
        if not self.densities or any(d < 1 for d in self.densities):
            raise ConfigError("densities must be >= 1")
        if self.sim_time <= 0:
            raise ConfigError("sim_time must be positive")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.application not in APPLICATIONS:
            raise ConfigError(f"application must be one of {APPLICATIONS}")

    def replace(self, **changes: Any) -> ScenarioConfig:
        try:
            return dataclasses.replace(self, **changes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_SECTIONS = {
    "radio": RadioConfig,
    "mac": MacConfig,
    "mobility": KinematicsConfig,
    "agent": AgentConfig,
    "traffic": TrafficConfig,
    "gateway": GatewayConfig,
}
_SECTION_FIELD = {"mobility": "kinematics"}


def _coerce(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p for p in raw.replace(",", " ").split() if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _apply(obj: Any, values: dict[str, str], section: str) -> Any:
    names = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in names or dataclasses.is_dataclass(names[key]):
            raise ConfigError(f"unknown key [{section}] {key}")
        changes[key] = _coerce(raw, names[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = base or ScenarioConfig()
    for name in parser.sections():
        values = dict(parser.items(name))
        if name == "scenario":
            cfg = _apply(cfg, values, name)
        elif name in _SECTIONS:
            attr = _SECTION_FIELD.get(name, name)
            cfg = cfg.replace(**{attr: _apply(getattr(cfg, attr), values, name)})
        else:
            raise ConfigError(f"unknown section [{name}]")
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
