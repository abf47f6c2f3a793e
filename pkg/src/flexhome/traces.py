"""Weather and load traces: synthetic clear-sky days, appliance events, CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .plant import WeatherSample


class IngestError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DayParams:
    sunrise_s: float = 6.5 * 3600
    sunset_s: float = 19.5 * 3600
    gmax_wm2: float = 1000.0
    amb_c: float = 20.0

    @property
    def solar_noon_s(self) -> float:
        return 0.5 * (self.sunrise_s + self.sunset_s)


def clearsky_irradiance(t_s: float, day: DayParams) -> float:
    """Irradiance at time-of-day ``t_s`` (seconds, wraps daily)."""
    if not day.sunrise_s < day.sunset_s:
        raise ValueError("sunrise must precede sunset")
    tod = t_s % 86400.0
    x = math.sin(math.pi * (tod - day.sunrise_s) / (day.sunset_s - day.sunrise_s))
    if tod <= day.sunrise_s or tod >= day.sunset_s or x <= 0.0:
        return 0.0
    return day.gmax_wm2 * x ** 1.2


def clearsky_sample(t_s: float, day: DayParams) -> WeatherSample:
    irr = clearsky_irradiance(t_s, day)
    return WeatherSample(t_s, irr, day.amb_c + 0.03 * irr)


def clearsky_weather(day: DayParams, t0_s: float, duration_s: float, step_s: float) -> List[WeatherSample]:
    n = int(round(duration_s / step_s))
    return [clearsky_sample(t0_s + k * step_s, day) for k in range(n)]


@dataclass(frozen=True)
class LoadEvent:
    start_s: float
    duration_s: float
    watts: float

    def active(self, t_s: float) -> bool:
        return self.start_s <= t_s < self.start_s + self.duration_s


@dataclass
class SyntheticLoad:
    """Base load plus appliance events, with optional seeded Gaussian jitter."""
    base_w: float = 1000.0
    events: Sequence[LoadEvent] = ()
    jitter_w: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.seed)

    def deterministic(self, t_s: float) -> float:
        return self.base_w + sum(e.watts for e in self.events if e.active(t_s))

    def at(self, t_s: float) -> float:
        """Load at ``t_s``; when jitter is enabled, call once per step in time order."""
        p = self.deterministic(t_s)
        if self.jitter_w > 0:
            p += float(self._rng.normal(0.0, self.jitter_w))
        return max(p, 0.0)


def load_trace(base_w: float, events: Sequence[LoadEvent], t0_s: float, duration_s: float,
               step_s: float) -> List[float]:
    src = SyntheticLoad(base_w, tuple(events))
    n = int(round(duration_s / step_s))
    return [src.at(t0_s + k * step_s) for k in range(n)]


def read_series_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a ``t_s,value`` CSV with a header row and strictly increasing ``t_s``."""
    path = Path(path)
    ts: List[float] = []
    vs: List[float] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t_s", "value"]:
            raise IngestError(f"{path}: expected header 't_s,value', got {header!r}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise IngestError(f"{path}: expected 2 columns, got {len(row)}", lineno)
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise IngestError(f"{path}: non-numeric row {row!r}", lineno) from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise IngestError(f"{path}: non-finite value in {row!r}", lineno)
            if ts and t <= ts[-1]:
                raise IngestError(f"{path}: t_s not increasing ({t} after {ts[-1]})", lineno)
            ts.append(t)
            vs.append(v)
    if not ts:
        raise IngestError(f"{path}: no data rows")
    return np.asarray(ts), np.asarray(vs)


class SeriesTrace:
    """Linearly interpolated series, held constant beyond its ends."""

    def __init__(self, t_s: np.ndarray, values: np.ndarray):
        self.t_s = np.asarray(t_s, dtype=float)
        self.values = np.asarray(values, dtype=float)

    @classmethod
    def from_csv(cls, path) -> "SeriesTrace":
        return cls(*read_series_csv(path))

    def at(self, t_s: float) -> float:
        return float(np.interp(t_s, self.t_s, self.values))


class CsvWeather:
    def __init__(self, irr: SeriesTrace, tmp: SeriesTrace):
        self.irr = irr
        self.tmp = tmp

    def at(self, t_s: float) -> WeatherSample:
        irr = self.irr.at(t_s)
        if irr < 0:
            raise IngestError(f"negative irradiance {irr} at t={t_s}")
        return WeatherSample(t_s, irr, self.tmp.at(t_s))


class ClearSkyWeather:
    def __init__(self, day: DayParams):
        if not day.sunrise_s < day.sunset_s:
            raise ValueError("sunrise must precede sunset")
        self.day = day

    def at(self, t_s: float) -> WeatherSample:
        return clearsky_sample(t_s, self.day)
