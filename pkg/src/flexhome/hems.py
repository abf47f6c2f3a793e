"""Home energy management: the four control strategies and the tracking metric.

Controllers are pure functions or small state machines; :class:`Hems` wires
them to the server through an ACSI connection, so every action lands in the
model as a setpoint or control value and the plant picks it up from there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from . import iec_model as im
from .plant import PlantConfig, battery_power_limits
from .values import DataValue

DAY_S = 86400.0
SCENARIOS = ("battery", "inverter", "load", "market")


class PreferencesError(ValueError):
    pass


@dataclass(frozen=True)
class Preferences:
    cap_w: float = 2000.0
    switch_budget_s: float = 7200.0
    switch_windows: Tuple[Tuple[float, float], ...] = ((0.0, DAY_S),)
    min_switch_hold_s: float = 300.0
    switch_mode: str = "surplus"

    def validate(self) -> "Preferences":
        if self.cap_w < 0:
            raise PreferencesError("cap_w must be non-negative")
        if self.switch_budget_s < 0:
            raise PreferencesError("switch_budget_s must be non-negative")
        if self.min_switch_hold_s < 0:
            raise PreferencesError("min_switch_hold_s must be non-negative")
        if self.switch_mode not in ("surplus", "scheduled"):
            raise PreferencesError(f"unknown switch_mode {self.switch_mode!r}")
        prev_end = -math.inf
        for start, end in sorted(self.switch_windows):
            if not 0 <= start < end <= DAY_S:
                raise PreferencesError(f"window ({start}, {end}) must lie within one day")
            if start < prev_end:
                raise PreferencesError("switch windows overlap")
            prev_end = end
        return self

    def in_window(self, t_s: float) -> bool:
        tod = t_s % DAY_S
        return any(start <= tod < end for start, end in self.switch_windows)


# -- scenario controllers -------------------------------------------------------------

def battery_controller(p_pv_w: float, p_load_w: float, p_ref_w: float = 0.0) -> float:
    """Battery setpoint that closes the gap between net generation and the reference."""
    return p_pv_w - p_load_w - p_ref_w


def curtailment_controller(p_load_w: float, p_batt_w: float, p_ref_w: float, mppt_w: float) -> float:
    return min(max(p_load_w + p_batt_w + p_ref_w, 0.0), mppt_w)


class SwitchBudget:
    """Daily ON-time allowance, reset at midnight."""

    def __init__(self, budget_s: float):
        self.budget_s = budget_s
        self.used_s = 0.0
        self._day: Optional[int] = None

    def roll(self, t_s: float) -> None:
        day = int(t_s // DAY_S)
        if day != self._day:
            self._day = day
            self.used_s = 0.0

    def allows(self, dt_s: float) -> bool:
        return self.budget_s - self.used_s >= dt_s

    def consume(self, dt_s: float) -> None:
        self.used_s += dt_s


class LoadController:
    """Surplus-driven hysteresis for one switchable load.

    ON after the surplus has covered the load continuously for the hold time
    (inside a window, with budget left); OFF after it has fallen short
    continuously for the hold time. Voluntary changes are at least one hold
    time apart. Leaving the window or running out of budget forces OFF at once.
    """

    def __init__(self, prefs: Preferences, switch_w: float, dt_s: float):
        self.prefs = prefs
        self.switch_w = switch_w
        self.dt_s = dt_s
        self.budget = SwitchBudget(prefs.switch_budget_s)
        self.on = False
        self.above_s = 0.0
        self.below_s = 0.0
        self.last_change_s = -math.inf

    def step(self, t_s: float, surplus_w: float) -> bool:
        """Decide the switch state for the step starting at ``t_s``."""
        self.budget.roll(t_s)
        dt = self.dt_s
        self.above_s = self.above_s + dt if surplus_w >= self.switch_w else 0.0
        self.below_s = self.below_s + dt if surplus_w - self.switch_w < 0 else 0.0
        may_change = t_s - self.last_change_s >= self.prefs.min_switch_hold_s
        hold = self.prefs.min_switch_hold_s
        allowed = self.prefs.in_window(t_s) and self.budget.allows(dt)
        if self.on:
            if not allowed or (self.below_s >= hold and may_change):
                self._set(False, t_s)
        elif allowed and self.above_s >= hold and may_change:
            self._set(True, t_s)
        if self.on:
            self.budget.consume(dt)
        return self.on

    def _set(self, on: bool, t_s: float) -> None:
        self.on = on
        self.last_change_s = t_s


def load_controller(surplus_w: Sequence[float], prefs: Preferences, t0_s: float = 0.0, dt_s: float = 1.0,
                    switch_w: float = 700.0) -> List[bool]:
    ctl = LoadController(prefs, switch_w, dt_s)
    return [ctl.step(t0_s + k * dt_s, s) for k, s in enumerate(surplus_w)]


@dataclass(frozen=True)
class Branch:
    switch_on: bool
    batt_cmd_w: float
    inverter_target_w: float
    p_grid_w: float

    def error(self, p_ref_w: float) -> float:
        return abs(self.p_grid_w - p_ref_w)


def evaluate_branch(switch_on: bool, p_ref_w: float, mppt_w: float, p_load_base_w: float,
                    batt_limits: Tuple[float, float], switch_w: float) -> Branch:
    load = p_load_base_w + (switch_w if switch_on else 0.0)
    lo, hi = batt_limits
    batt = min(max(mppt_w - load - p_ref_w, lo), hi)
    grid = mppt_w - load - batt
    if grid > p_ref_w:
        target = min(max(load + batt + p_ref_w, 0.0), mppt_w)
        grid = target - load - batt
    else:
        target = mppt_w
    return Branch(switch_on, batt, target, grid)


@dataclass(frozen=True)
class TrackerDecision:
    chosen: Branch
    rejected: Optional[Branch]

    @property
    def switch_on(self) -> bool:
        return self.chosen.switch_on


def market_tracker(p_ref_w: float, mppt_w: float, p_load_base_w: float, soc: float, prefs: Preferences,
                   cfg: PlantConfig, switch_allowed: bool = True) -> TrackerDecision:
    """Pick the switch state whose predicted exchange is closest to ``p_ref_w``.

    Equal errors go to the branch that curtails less PV, then to OFF.
    """
    limits = battery_power_limits(soc, cfg.step_s, cfg)
    off = evaluate_branch(False, p_ref_w, mppt_w, p_load_base_w, limits, cfg.switch_load_w)
    if not switch_allowed or not cfg.switchable_loads:
        return TrackerDecision(off, None)
    on = evaluate_branch(True, p_ref_w, mppt_w, p_load_base_w, limits, cfg.switch_load_w)
    e_on, e_off = on.error(p_ref_w), off.error(p_ref_w)
    if e_on < e_off or (e_on == e_off and on.inverter_target_w > off.inverter_target_w):
        return TrackerDecision(on, off)
    return TrackerDecision(off, on)


class MarketController:
    def __init__(self, prefs: Preferences, cfg: PlantConfig):
        self.prefs = prefs
        self.cfg = cfg
        self.budget = SwitchBudget(prefs.switch_budget_s)
        self.last: Optional[TrackerDecision] = None

    def step(self, t_s: float, p_ref_w: float, mppt_w: float, p_load_base_w: float, soc: float) -> TrackerDecision:
        self.budget.roll(t_s)
        dt = self.cfg.step_s
        allowed = self.prefs.in_window(t_s) and self.budget.allows(dt)
        if self.prefs.switch_mode == "scheduled":
            d = market_tracker(p_ref_w, mppt_w, p_load_base_w, soc, self.prefs, self.cfg, switch_allowed=True)
            want_on = allowed and bool(self.cfg.switchable_loads)
            if d.switch_on != want_on:
                d = TrackerDecision(d.rejected, d.chosen)
        else:
            d = market_tracker(p_ref_w, mppt_w, p_load_base_w, soc, self.prefs, self.cfg, switch_allowed=allowed)
        if d.switch_on:
            self.budget.consume(dt)
        self.last = d
        return d


# -- tracking metric ---------------------------------------------------------------------

@dataclass
class TrackingRecord:
    dt_s: float = 1.0
    t_s: List[float] = field(default_factory=list)
    p_grid_w: List[float] = field(default_factory=list)
    p_ref_w: List[float] = field(default_factory=list)
    energy_error_kwh: float = 0.0

    def append(self, t_s: float, p_grid_w: float, p_ref_w: float) -> None:
        self.t_s.append(t_s)
        self.p_grid_w.append(p_grid_w)
        self.p_ref_w.append(p_ref_w)
        self.energy_error_kwh += abs(p_grid_w - p_ref_w) * self.dt_s / 3.6e6


def error_integral(records, dt_s: float) -> float:
    """Accumulated |pGrid − pRef| in kWh over ``(p_grid_w, p_ref_w)`` pairs or a TrackingRecord."""
    if isinstance(records, TrackingRecord):
        records = zip(records.p_grid_w, records.p_ref_w)
    return sum(abs(g - r) for g, r in records) * dt_s / 3.6e6


# -- orchestration ------------------------------------------------------------------------

class Hems:
    """Runs one scenario controller against the server through ``conn``.

    The harness calls :meth:`pre_generation` after the plant has published
    this step's measurements and :meth:`post_generation` once the inverter
    and switch have acted, so the battery can settle the residual.
    """

    def __init__(self, conn, scenario: str, cfg: PlantConfig, prefs: Preferences, load_control: bool = True):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        self.conn = conn
        self.scenario = scenario
        self.cfg = cfg
        self.prefs = prefs
        self.load_control = load_control
        self.p_ref_w = 0.0
        self.load_ctl = LoadController(prefs, cfg.switch_load_w, cfg.step_s)
        self.market = MarketController(prefs, cfg)
        self.decision: Optional[TrackerDecision] = None
        self._has_switch = bool(cfg.switchable_loads)
        self._switch_cmd: Optional[bool] = None
        self._inv_cmd: Optional[float] = None
        self._batt_cmd: Optional[float] = None

    def _read(self, ref: str) -> float:
        return self.conn.read(ref)[0].value

    def _set_float(self, ref: str, value: float, last: Optional[float]) -> float:
        v = DataValue.float32(value)
        if last is None or DataValue.float32(last) != v:
            self.conn.write(ref, v)
        return value

    def _set_switch(self, on: bool) -> None:
        if self._has_switch and on != self._switch_cmd:
            self.conn.write(im.switch_ctl_ref(0), DataValue.bool(on))
            self._switch_cmd = on

    def _base_load(self) -> float:
        total = self._read(im.LOAD_W)
        switched = sum(self._read(im.switch_power_ref(i)) for i in range(len(self.cfg.switchable_loads)))
        return total - switched

    def pre_generation(self, t_s: float) -> None:
        sc = self.scenario
        if sc == "battery":
            self._inv_cmd = self._set_float(im.INV_SET, self.cfg.pv_peak_w, self._inv_cmd)
            self._set_switch(False)
        elif sc == "inverter":
            mppt = self._read(im.PV_MMDC)
            target = curtailment_controller(self._read(im.LOAD_W), self._read(im.BAT_W), self.p_ref_w, mppt)
            self._inv_cmd = self._set_float(im.INV_SET, target, self._inv_cmd)
            self._set_switch(False)
        elif sc == "load":
            self._inv_cmd = self._set_float(im.INV_SET, self.cfg.pv_peak_w, self._inv_cmd)
            if self._has_switch:
                surplus = self._read(im.PV_W) - self._base_load()
                on = self.load_ctl.step(t_s, surplus) if self.load_control else False
                self._set_switch(on)
        else:
            mppt = self._read(im.PV_MMDC)
            soc = self._read(im.BAT_SOC) / 100.0
            d = self.market.step(t_s, self.p_ref_w, mppt, self._base_load(), soc)
            self.decision = d
            self._set_switch(d.switch_on)
            self._inv_cmd = self._set_float(im.INV_SET, d.chosen.inverter_target_w, self._inv_cmd)

    def post_generation(self, t_s: float) -> None:
        if self.scenario in ("battery", "market"):
            cmd = battery_controller(self._read(im.PV_W), self._read(im.LOAD_W), self.p_ref_w)
        else:
            cmd = 0.0
        self._batt_cmd = self._set_float(im.BAT_SPT, cmd, self._batt_cmd)
