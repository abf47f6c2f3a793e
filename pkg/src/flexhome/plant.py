"""Discrete-time physical model of the installation.

PV array with a first-order inverter response, a battery with SOC bookkeeping,
trace-driven base load plus switchable loads, and grid metering. Sign
conventions: battery power positive when charging, grid power positive when
injecting into the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from . import iec_model as im
from .iec_model import Channel, ServerModel
from .values import DataValue


class PlantConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SwitchableLoad:
    name: str
    watts: float = 700.0


@dataclass(frozen=True)
class PlantConfig:
    pv_peak_w: float = 4000.0
    gamma_per_c: float = -0.004
    inv_tau_s: float = 10.0
    bat_cap_wh: float = 8000.0
    bat_max_w: float = 1800.0
    soc_min: float = 0.10
    soc_max: float = 0.95
    soc_init: float = 0.50
    round_trip_eff: float = 1.0
    battery_enabled: bool = True
    switchable_loads: Tuple[SwitchableLoad, ...] = (SwitchableLoad("toaster", 700.0),)
    step_s: float = 1.0

    def validate(self) -> "PlantConfig":
        for name in ("pv_peak_w", "inv_tau_s", "bat_cap_wh", "bat_max_w", "step_s"):
            if not getattr(self, name) > 0:
                raise PlantConfigError(f"{name} must be positive")
        if not 0 < self.round_trip_eff <= 1:
            raise PlantConfigError("round_trip_eff must be in (0, 1]")
        if not 0 <= self.soc_min < self.soc_init < self.soc_max <= 1:
            raise PlantConfigError("need 0 <= soc_min < soc_init < soc_max <= 1")
        for load in self.switchable_loads:
            if not load.watts > 0:
                raise PlantConfigError(f"switchable load {load.name!r} must draw positive power")
        return self

    @property
    def switch_load_w(self) -> float:
        return self.switchable_loads[0].watts if self.switchable_loads else 0.0


@dataclass(frozen=True)
class WeatherSample:
    t_s: float
    irr_wm2: float
    pnl_tmp_c: float


@dataclass(frozen=True)
class PlantInputs:
    batt_setpoint_w: float = 0.0
    inverter_target_w: float = math.inf
    switch_on: Tuple[bool, ...] = ()


@dataclass(frozen=True)
class PlantState:
    t_s: float = 0.0
    p_pv_w: float = 0.0
    p_pv_mppt_w: float = 0.0
    p_batt_w: float = 0.0
    soc: float = 0.5
    p_load_base_w: float = 0.0
    p_load_w: float = 0.0
    switch_on: Tuple[bool, ...] = ()
    p_grid_w: float = 0.0
    irr_wm2: float = 0.0
    pnl_tmp_c: float = 25.0

    @classmethod
    def initial(cls, cfg: PlantConfig, t_s: float = 0.0) -> "PlantState":
        return cls(t_s=t_s, soc=cfg.soc_init, switch_on=tuple(False for _ in cfg.switchable_loads))


def pv_mppt_power(irr: float, tmp: float, cfg: PlantConfig) -> float:
    """Available DC power at the maximum power point (linear temperature derate)."""
    if irr < 0:
        raise ValueError("irradiance must be non-negative")
    p = cfg.pv_peak_w * (irr / 1000.0) * (1.0 + cfg.gamma_per_c * (tmp - 25.0))
    return max(p, 0.0)


def inverter_step(target_w: float, prev_out_w: float, dt_s: float, cfg: PlantConfig,
                  mppt_w: float = math.inf) -> float:
    out = prev_out_w + (target_w - prev_out_w) * (1.0 - math.exp(-dt_s / cfg.inv_tau_s))
    return min(max(out, 0.0), mppt_w)


def _effs(cfg: PlantConfig) -> Tuple[float, float]:
    eta = math.sqrt(cfg.round_trip_eff)
    return eta, eta


def battery_power_limits(soc: float, dt_s: float, cfg: PlantConfig) -> Tuple[float, float]:
    """Feasible battery power range (discharge <= 0 <= charge) for one step."""
    if not cfg.battery_enabled:
        return 0.0, 0.0
    eta_c, eta_d = _effs(cfg)
    k = 3600.0 * cfg.bat_cap_wh / dt_s
    hi = min(cfg.bat_max_w, max(0.0, (cfg.soc_max - soc) * k / eta_c))
    lo = max(-cfg.bat_max_w, min(0.0, (cfg.soc_min - soc) * k * eta_d))
    return lo, hi


def battery_step(p_cmd_w: float, soc: float, dt_s: float, cfg: PlantConfig) -> Tuple[float, float]:
    lo, hi = battery_power_limits(soc, dt_s, cfg)
    p_act = min(max(p_cmd_w, lo), hi)
    eta_c, eta_d = _effs(cfg)
    stored = p_act * eta_c if p_act > 0 else p_act / eta_d
    soc_new = soc + stored * dt_s / (3600.0 * cfg.bat_cap_wh)
    # guard against last-ulp overshoot at the window edges
    soc_new = min(max(soc_new, cfg.soc_min), cfg.soc_max) if cfg.battery_enabled else soc
    return p_act, soc_new


def grid_exchange(p_pv_w: float, p_load_w: float, p_batt_w: float) -> float:
    return p_pv_w - p_load_w - p_batt_w


def _switch_tuple(cfg: PlantConfig, switch_on) -> Tuple[bool, ...]:
    n = len(cfg.switchable_loads)
    s = tuple(bool(x) for x in switch_on)[:n]
    return s + (False,) * (n - len(s))


def switched_power(cfg: PlantConfig, switch_on: Tuple[bool, ...]) -> float:
    return sum(load.watts for load, on in zip(cfg.switchable_loads, switch_on) if on)


def plant_step(state: PlantState, inputs: PlantInputs, weather: WeatherSample, load_w: float,
               cfg: PlantConfig) -> PlantState:
    """Advance the installation by one step with all actuator inputs known."""
    dt = cfg.step_s
    mppt = pv_mppt_power(weather.irr_wm2, weather.pnl_tmp_c, cfg)
    target = min(max(inputs.inverter_target_w, 0.0), mppt)
    p_pv = inverter_step(target, state.p_pv_w, dt, cfg, mppt)
    switch = _switch_tuple(cfg, inputs.switch_on)
    p_load = load_w + switched_power(cfg, switch)
    p_batt, soc = battery_step(inputs.batt_setpoint_w, state.soc, dt, cfg)
    return PlantState(
        t_s=weather.t_s, p_pv_w=p_pv, p_pv_mppt_w=mppt, p_batt_w=p_batt, soc=soc,
        p_load_base_w=load_w, p_load_w=p_load, switch_on=switch,
        p_grid_w=grid_exchange(p_pv, p_load, p_batt),
        irr_wm2=weather.irr_wm2, pnl_tmp_c=weather.pnl_tmp_c,
    )


class Plant:
    """The plant bound to a server model.

    A step runs in three phases so a controller can act between them:
    ``sense`` publishes weather, available PV power and the current load;
    ``generate`` applies switch and inverter commands; ``store`` applies the
    battery command and meters the grid. Commands come from ``commands``,
    which the harness keeps up to date from the GOOSE command dataset.
    The combined result equals :func:`plant_step` with the same inputs.
    """

    def __init__(self, model: ServerModel, cfg: PlantConfig, t0_s: float = 0.0):
        self.model = model
        self.cfg = cfg
        self.state = PlantState.initial(cfg, t0_s)
        self.commands: Dict[str, object] = {}
        self._weather: Optional[WeatherSample] = None
        self._p_pv = 0.0
        self._mppt = 0.0
        self._switch: Tuple[bool, ...] = self.state.switch_on
        self._load_base = 0.0

    # commands -------------------------------------------------------------

    def latch(self, ref: str, value: DataValue) -> None:
        self.commands[ref] = value.value

    def latch_from_model(self) -> None:
        refs = [im.BAT_SPT, im.INV_SET] + [im.switch_ctl_ref(i) for i in range(len(self.cfg.switchable_loads))]
        for ref, (v, _) in zip(refs, self.model.read_many(refs)):
            self.commands[ref] = v.value

    def inputs(self) -> PlantInputs:
        c = self.commands
        n = len(self.cfg.switchable_loads)
        return PlantInputs(
            batt_setpoint_w=float(c.get(im.BAT_SPT, 0.0)),
            inverter_target_w=float(c.get(im.INV_SET, self.cfg.pv_peak_w)),
            switch_on=tuple(bool(c.get(im.switch_ctl_ref(i), False)) for i in range(n)),
        )

    # phases ---------------------------------------------------------------

    def _write(self, items) -> None:
        self.model.write_values([(r, DataValue.float32(v)) for r, v in items], Channel.PLANT)

    def _load_items(self, switch: Tuple[bool, ...], base: float):
        items = [(im.LOAD_W, base + switched_power(self.cfg, switch))]
        for i, (load, on) in enumerate(zip(self.cfg.switchable_loads, switch)):
            items.append((im.switch_power_ref(i), load.watts if on else 0.0))
        return items

    def sense(self, weather: WeatherSample, load_base_w: float) -> None:
        self._weather = weather
        self._load_base = load_base_w
        self._mppt = pv_mppt_power(weather.irr_wm2, weather.pnl_tmp_c, self.cfg)
        items = [(im.PV_IRR, weather.irr_wm2), (im.PV_TMP, weather.pnl_tmp_c), (im.PV_MMDC, self._mppt)]
        items += self._load_items(self._switch, load_base_w)
        self._write(items)

    def generate(self) -> None:
        inp = self.inputs()
        target = min(max(inp.inverter_target_w, 0.0), self._mppt)
        self._p_pv = inverter_step(target, self.state.p_pv_w, self.cfg.step_s, self.cfg, self._mppt)
        self._switch = _switch_tuple(self.cfg, inp.switch_on)
        self._write([(im.PV_W, self._p_pv)] + self._load_items(self._switch, self._load_base))

    def store(self) -> PlantState:
        inp = self.inputs()
        p_batt, soc = battery_step(inp.batt_setpoint_w, self.state.soc, self.cfg.step_s, self.cfg)
        p_load = self._load_base + switched_power(self.cfg, self._switch)
        w = self._weather
        self.state = PlantState(
            t_s=w.t_s, p_pv_w=self._p_pv, p_pv_mppt_w=self._mppt, p_batt_w=p_batt, soc=soc,
            p_load_base_w=self._load_base, p_load_w=p_load, switch_on=self._switch,
            p_grid_w=grid_exchange(self._p_pv, p_load, p_batt),
            irr_wm2=w.irr_wm2, pnl_tmp_c=w.pnl_tmp_c,
        )
        self._write([(im.BAT_W, p_batt), (im.BAT_SOC, soc * 100.0), (im.GRID_W, self.state.p_grid_w)])
        return self.state

    def step(self, weather: WeatherSample, load_base_w: float) -> PlantState:
        self.sense(weather, load_base_w)
        self.generate()
        return self.store()


def check_state(state: PlantState, cfg: PlantConfig) -> None:
    """Raise AssertionError with a diagnostic if a physical invariant is broken."""
    balance = state.p_pv_w - state.p_load_w - state.p_batt_w
    if state.p_grid_w != balance:
        raise AssertionError(f"t={state.t_s}: power balance broken ({state.p_grid_w} != {balance})")
    if not cfg.soc_min <= state.soc <= cfg.soc_max:
        raise AssertionError(f"t={state.t_s}: soc {state.soc} outside [{cfg.soc_min}, {cfg.soc_max}]")
    if abs(state.p_batt_w) > cfg.bat_max_w:
        raise AssertionError(f"t={state.t_s}: battery power {state.p_batt_w} beyond {cfg.bat_max_w}")
    if state.p_pv_w < 0 or state.p_pv_w > state.p_pv_mppt_w:
        raise AssertionError(f"t={state.t_s}: pv output {state.p_pv_w} outside [0, {state.p_pv_mppt_w}]")
