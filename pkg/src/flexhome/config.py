"""Run configuration: one TOML file, validated into typed sections."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hems import SCENARIOS, Preferences, PreferencesError
from .plant import PlantConfig, PlantConfigError, SwitchableLoad
from .traces import DayParams, LoadEvent


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TraceConfig:
    weather: str = "clearsky"
    irr_csv: Optional[str] = None
    tmp_csv: Optional[str] = None
    sunrise_h: float = 6.5
    sunset_h: float = 19.5
    gmax_wm2: float = 1000.0
    amb_c: float = 20.0
    load_base_w: float = 1000.0
    load_csv: Optional[str] = None
    load_jitter_w: float = 0.0
    load_events: Tuple[LoadEvent, ...] = ()

    @property
    def day(self) -> DayParams:
        return DayParams(self.sunrise_h * 3600.0, self.sunset_h * 3600.0, self.gmax_wm2, self.amb_c)


@dataclass(frozen=True)
class TransportConfig:
    mode: str = "inprocess"
    goose_group: str = "239.61.8.50"
    goose_port: int = 10285
    goose_iface: str = "127.0.0.1"
    acsi_port: int = 10203
    broker_port: int = 10280
    bridge: bool = True
    bridge_period_ms: int = 1000
    time_scale: float = 1.0
    broker_snapshot: Optional[str] = None


@dataclass(frozen=True)
class AggregatorConfig:
    n_houses: int = 35
    pv_fraction: float = 0.6
    base_load_w: float = 600.0
    cap_w: float = 2000.0
    interval_s: int = 900
    lead_s: float = 60.0
    prosumer_id: str = "hems-1"
    rec_csv: Optional[str] = None
    target_csv: Optional[str] = None


@dataclass(frozen=True)
class HemsConfig:
    load_control: bool = True
    p_ref_w: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    duration_s: float
    start_s: float = 0.0
    seed: int = 0
    plant: PlantConfig = PlantConfig()
    preferences: Preferences = Preferences()
    traces: TraceConfig = TraceConfig()
    transports: TransportConfig = TransportConfig()
    aggregator: Optional[AggregatorConfig] = None
    hems: HemsConfig = HemsConfig()
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, p: Optional[str]) -> Optional[Path]:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.plant.step_s))


def _section(cls, raw: Any, name: str, convert: Optional[Dict[str, Any]] = None):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = dict(raw)
    for key, fn in (convert or {}).items():
        if key in kwargs:
            try:
                kwargs[key] = fn(kwargs[key])
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _loads(items) -> Tuple[SwitchableLoad, ...]:
    return tuple(SwitchableLoad(str(d["name"]), float(d.get("watts", 700.0))) for d in items)


def _events(items) -> Tuple[LoadEvent, ...]:
    return tuple(LoadEvent(float(d["start_s"]), float(d["duration_s"]), float(d["watts"])) for d in items)


def _windows(items) -> Tuple[Tuple[float, float], ...]:
    out = []
    for w in items:
        if len(w) != 2:
            raise ValueError("each window is [start_s, end_s]")
        out.append((float(w[0]), float(w[1])))
    return tuple(out)


def parse_config(raw: Mapping[str, Any], base_dir: Path = Path(".")) -> RunConfig:
    top = {"scenario", "duration_s", "start_s", "seed", "plant", "preferences", "traces", "transports",
           "aggregator", "hems"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    scenario = raw.get("scenario")
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}, got {scenario!r}")
    duration = raw.get("duration_s")
    if isinstance(duration, bool) or not isinstance(duration, (int, float)) or not duration > 0:
        raise ConfigError("duration_s must be a positive number")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    start = raw.get("start_s", 0.0)
    if isinstance(start, bool) or not isinstance(start, (int, float)) or start < 0:
        raise ConfigError("start_s must be a non-negative number")

    plant = _section(PlantConfig, raw.get("plant"), "plant", {"switchable_loads": _loads})
    prefs = _section(Preferences, raw.get("preferences"), "preferences", {"switch_windows": _windows})
    traces = _section(TraceConfig, raw.get("traces"), "traces", {"load_events": _events})
    transports = _section(TransportConfig, raw.get("transports"), "transports")
    hems = _section(HemsConfig, raw.get("hems"), "hems")
    agg = _section(AggregatorConfig, raw["aggregator"], "aggregator") if "aggregator" in raw else None

    try:
        plant.validate()
        prefs.validate()
    except (PlantConfigError, PreferencesError) as exc:
        raise ConfigError(str(exc)) from None
    if traces.weather not in ("clearsky", "csv"):
        raise ConfigError("traces.weather must be 'clearsky' or 'csv'")
    if traces.weather == "csv" and not (traces.irr_csv and traces.tmp_csv):
        raise ConfigError("csv weather needs traces.irr_csv and traces.tmp_csv")
    if not traces.sunrise_h < traces.sunset_h:
        raise ConfigError("traces.sunrise_h must precede sunset_h")
    if transports.mode not in ("inprocess", "network"):
        raise ConfigError("transports.mode must be 'inprocess' or 'network'")
    if transports.bridge_period_ms < 10:
        raise ConfigError("transports.bridge_period_ms must be at least 10")
    if not transports.time_scale > 0:
        raise ConfigError("transports.time_scale must be positive")
    if scenario == "market":
        if agg is None:
            raise ConfigError("scenario 'market' needs an [aggregator] section")
        if agg.n_houses < 1 or not 0 <= agg.pv_fraction <= 1 or agg.interval_s <= 0 or agg.cap_w < 0:
            raise ConfigError("invalid [aggregator] parameters")
        if not 0 < agg.lead_s < agg.interval_s:
            raise ConfigError("aggregator.lead_s must lie inside one interval")
    cfg = RunConfig(scenario, float(duration), float(start), seed, plant, prefs, traces, transports, agg, hems,
                    base_dir)
    if cfg.n_steps < 1:
        raise ConfigError("duration_s shorter than one step")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent)
