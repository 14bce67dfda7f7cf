"""Scenario files: a YAML document is parsed into a typed config tree with
strict key checking, and the fully resolved tree is hashed so every output
directory is keyed by exactly the configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from .coherent import CARRIER_MAX_HZ, CARRIER_MIN_HZ, MAX_TX_POWER_DBM
from .fabric import ConfigurationError, FabricConfig
from .timesync import TimesyncConfig


@dataclass
class PowerConfig:
    enabled: bool = True
    global_budget_w: float = 9000.0
    midspan_count: int = 4
    midspan_budget_w: float | None = None   # None → equal split of the global
    requested_class: int | None = 3         # None → classify from measured draw
    base_mw: int = 500
    processing_mw: int = 2500               # steady draw behind the logic switch
    peripheral_mw: int = 500                # steady draw behind the aux switch
    detection_window_ms: int = 75
    overdraw_tile: str | None = None        # fault injection: one greedy tile
    overdraw_at_s: float = 10.0
    overdraw_w: float = 20.0


@dataclass
class DataplaneConfig:
    enabled: bool = True
    topic: str = "samples"
    partitions: int = 8
    retention_records: int = 65536
    producer_tiles: int = 16                # first N producer-role tiles publish
    produce_interval_ms: float = 100.0
    record_bytes: int = 8192
    consumer_groups: int = 2
    consumers_per_group: int = 4
    poll_interval_ms: float = 200.0
    max_poll_records: int = 512
    load_window_ms: float = 100.0           # link-utilization averaging window


@dataclass
class CoherentConfig:
    enabled: bool = True
    carrier_hz: float = 4.0e8
    tx_power_dbm: float = 10.0
    target: tuple = (4.0, 2.0, 1.0)
    trials: int = 200
    tile_count: int | None = 16             # subset of radio tiles; None → all
    phase_noise_sigma_rad: float = 0.0
    stream_label: str = "coherent"


@dataclass
class RoverConfig:
    enabled: bool = True
    area: tuple | None = (0.6, 0.6, 3.0, 3.0)
    resolution_m: float = 0.6
    z_resolution_m: float = 0.6
    obstacles: tuple = ()
    beacon_sigma_m: float = 0.01
    beacon_rate_hz: float = 10.0
    outlier_prob: float = 0.0
    battery_capacity_wh: float = 170.0
    battery_peak_w: float = 480.0
    speed_mps: float = 0.3
    tick_s: float = 0.1
    max_duration_s: float = 7200.0
    stream_label: str = "rover"


@dataclass
class ScenarioConfig:
    name: str = "default"
    seed: int = 42
    duration_s: float = 300.0
    trace_events: bool = False
    fabric: FabricConfig = field(default_factory=FabricConfig)
    timesync: TimesyncConfig = field(default_factory=TimesyncConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    dataplane: DataplaneConfig = field(default_factory=DataplaneConfig)
    coherent: CoherentConfig = field(default_factory=CoherentConfig)
    rover: RoverConfig = field(default_factory=RoverConfig)


def _coerce_lists(value):
    if isinstance(value, list):
        return tuple(_coerce_lists(v) for v in value)
    return value


def _coerce_float(value, where: str):
    # YAML 1.1 reads exponents without a sign ("2.45e9") as strings
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where}: expected a number, got {value!r}") from None


def _build(cls, data, where: str):
    """Instantiate a config dataclass from a mapping, rejecting unknown keys
    with the list of valid ones so typos are caught at load time."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    valid = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            raise ConfigurationError(
                f"{where}: unknown key {key!r} (valid: {', '.join(sorted(valid))})")
        hint = hints.get(key)
        if dataclasses.is_dataclass(hint) and not isinstance(value, hint):
            value = _build(hint, value, f"{where}.{key}")
        elif (hint is float or float in typing.get_args(hint)) \
                and isinstance(value, (int, str)) and not isinstance(value, bool):
            value = _coerce_float(value, f"{where}.{key}")
        else:
            value = _coerce_lists(value)
        kwargs[key] = value
    return cls(**kwargs)


def scenario_from_dict(data: dict, where: str = "scenario") -> ScenarioConfig:
    return _build(ScenarioConfig, data, where)


def load_scenario(path) -> ScenarioConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return scenario_from_dict(data, where=str(path))


def resolved_dict(cfg: ScenarioConfig) -> dict:
    return dataclasses.asdict(cfg)


def resolved_json(cfg: ScenarioConfig) -> str:
    """Canonical serialization: sorted keys, no whitespace, so equal configs
    hash equally regardless of how the YAML was formatted."""
    return json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))


def scenario_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(resolved_json(cfg).encode()).hexdigest()


def validate_scenario(cfg: ScenarioConfig) -> list[str]:
    """Cross-field checks that a single dataclass cannot express.  Returns a
    list of human-readable problems; empty means the scenario is runnable."""
    problems = []
    if cfg.duration_s <= 0:
        problems.append("duration_s must be positive")
    if cfg.seed < 0:
        problems.append("seed must be non-negative")
    room = cfg.fabric.room
    if cfg.coherent.enabled:
        c = cfg.coherent
        if not CARRIER_MIN_HZ <= c.carrier_hz <= CARRIER_MAX_HZ:
            problems.append(
                f"coherent.carrier_hz {c.carrier_hz:g} outside "
                f"[{CARRIER_MIN_HZ:g}, {CARRIER_MAX_HZ:g}]")
        if c.tx_power_dbm > MAX_TX_POWER_DBM:
            problems.append(f"coherent.tx_power_dbm {c.tx_power_dbm} exceeds "
                            f"{MAX_TX_POWER_DBM}")
        if c.trials < 1:
            problems.append("coherent.trials must be at least 1")
        x, y, z = c.target
        if not (0 <= x <= room.length_m and 0 <= y <= room.width_m
                and 0 <= z <= room.height_m):
            problems.append("coherent.target lies outside the room")
    if cfg.power.enabled:
        if cfg.power.midspan_count < 1:
            problems.append("power.midspan_count must be at least 1")
        if cfg.power.global_budget_w <= 0:
            problems.append("power.global_budget_w must be positive")
    if cfg.dataplane.enabled:
        d = cfg.dataplane
        if d.partitions < 1:
            problems.append("dataplane.partitions must be at least 1")
        if d.producer_tiles < 0:
            problems.append("dataplane.producer_tiles must be non-negative")
        if d.consumer_groups < 0 or (d.consumer_groups and d.consumers_per_group < 1):
            problems.append("dataplane consumer topology is malformed")
    if cfg.rover.enabled:
        r = cfg.rover
        if r.area is not None:
            x0, y0, x1, y1 = r.area
            if not (0 <= x0 < x1 <= room.length_m and 0 <= y0 < y1 <= room.width_m):
                problems.append("rover.area must lie inside the room")
        if r.resolution_m <= 0 or r.z_resolution_m <= 0:
            problems.append("rover resolutions must be positive")
        if r.tick_s <= 0 or r.speed_mps <= 0:
            problems.append("rover tick and speed must be positive")
    if cfg.timesync.enabled:
        t = cfg.timesync
        if t.sync_interval_s <= 0:
            problems.append("timesync.sync_interval_s must be positive")
        if t.sample_interval_s <= 0:
            problems.append("timesync.sample_interval_s must be positive")
        for sw in t.boundary_switches:
            if not isinstance(sw, str):
                problems.append("timesync.boundary_switches must be switch ids")
                break
    return problems
