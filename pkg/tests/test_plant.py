import math

import pytest
from hypothesis import given, strategies as st

from flexhome import iec_model as im
from flexhome.iec_model import build_home_model
from flexhome.plant import (Plant, PlantConfig, PlantConfigError, PlantInputs, PlantState, SwitchableLoad,
                            WeatherSample, battery_power_limits, battery_step, check_state, grid_exchange,
                            inverter_step, plant_step, pv_mppt_power)
from flexhome.values import DataValue

import oracles

CFG = PlantConfig()


@pytest.mark.parametrize("irr, tmp, expected", [(1000, 25, 4000.0), (0, 40, 0.0), (800, 45, 2944.0)])
def test_mppt_examples(irr, tmp, expected):
    assert pv_mppt_power(irr, tmp, CFG) == pytest.approx(expected, abs=1e-9)


def test_mppt_clamps_and_rejects():
    assert pv_mppt_power(1000, 400, CFG) == 0.0
    with pytest.raises(ValueError):
        pv_mppt_power(-1, 25, CFG)


def test_inverter_examples():
    assert inverter_step(1234.5, 1234.5, 1.0, CFG) == 1234.5
    assert inverter_step(1000, 0, 10.0, CFG) == pytest.approx(1000 * (1 - math.exp(-1)), abs=1e-9)
    assert round(inverter_step(1000, 0, 10.0, CFG), 1) == 632.1
    out = 0.0
    for _ in range(50):
        out = inverter_step(1000, out, 1.0, CFG)
    assert abs(out - 1000) < 10
    assert inverter_step(1000, 0, 100.0, CFG, mppt_w=300) == 300


@given(st.floats(0, 4000), st.floats(0, 4000), st.integers(1, 200))
def test_inverter_monotone_approach(target, start, n):
    out, gap = start, abs(start - target)
    for _ in range(n):
        out = inverter_step(target, out, 1.0, CFG)
        assert abs(out - target) <= gap
        gap = abs(out - target)


def test_battery_examples():
    assert battery_step(2500, 0.5, 1, CFG)[0] == 1800
    assert battery_step(0, 0.37, 1, CFG) == (0, 0.37)
    p, soc = battery_step(1800, 0.5, 3600, CFG)
    assert p == 1800 and soc == pytest.approx(0.725, abs=1e-12)


def test_battery_window_edges():
    # 0.05 of 8 kWh is 400 Wh, so an hour-long step can only charge at 400 W
    p, soc = battery_step(1800, 0.90, 3600, CFG)
    assert p == pytest.approx(400.0) and soc == 0.95
    p, soc = battery_step(-1800, 0.10, 1, CFG)
    assert (p, soc) == (0.0, 0.10)


@given(st.floats(-5000, 5000), st.floats(0.10, 0.95), st.sampled_from([1.0, 10.0, 900.0, 3600.0]))
def test_battery_saturation(cmd, soc, dt):
    p, soc2 = battery_step(cmd, soc, dt, CFG)
    assert abs(p) <= CFG.bat_max_w
    assert CFG.soc_min <= soc2 <= CFG.soc_max
    lo, hi = oracles.battery_window(soc, dt)
    if lo <= cmd <= hi:
        assert p == cmd
    assert battery_power_limits(soc, dt, CFG) == pytest.approx((lo, hi), abs=1e-9)


@given(st.lists(st.floats(-3000, 3000), min_size=1, max_size=300))
def test_soc_conservation(cmds):
    soc = soc0 = CFG.soc_init
    total = 0.0
    for c in cmds:
        p, soc = battery_step(c, soc, 1.0, CFG)
        total += p
    expected = total / (3600.0 * CFG.bat_cap_wh)
    assert soc - soc0 == pytest.approx(expected, rel=1e-9, abs=1e-15)


@pytest.mark.parametrize("args, expected", [((4000, 1000, 3000), 0), ((0, 1000, -1000), 0), ((2000, 1000, 0), 1000)])
def test_grid_exchange(args, expected):
    assert grid_exchange(*args) == expected


def test_lossy_battery_and_disabled_battery():
    lossy = PlantConfig(round_trip_eff=0.81)
    _, soc = battery_step(1000, 0.5, 3600, lossy)
    assert soc == pytest.approx(0.5 + 900 / 8000)
    off = PlantConfig(battery_enabled=False)
    assert battery_step(1000, 0.5, 1, off) == (0.0, 0.5)


def test_config_validation():
    with pytest.raises(PlantConfigError):
        PlantConfig(soc_init=0.05).validate()
    with pytest.raises(PlantConfigError):
        PlantConfig(inv_tau_s=0).validate()
    with pytest.raises(PlantConfigError):
        PlantConfig(switchable_loads=(SwitchableLoad("x", 0),)).validate()
    assert CFG.validate() is CFG


def test_plant_step_zero_inputs():
    s0 = PlantState.initial(CFG)
    s1 = plant_step(s0, PlantInputs(), WeatherSample(0, 0, 20), 0.0, CFG)
    assert (s1.p_pv_w, s1.p_batt_w, s1.p_load_w, s1.p_grid_w, s1.soc) == (0, 0, 0, 0, 0.5)


def test_switch_adds_700w():
    s0 = PlantState.initial(CFG)
    s1 = plant_step(s0, PlantInputs(switch_on=(True,)), WeatherSample(0, 0, 20), 1000.0, CFG)
    assert s1.p_load_w == 1700.0 and s1.switch_on == (True,)


@given(st.floats(0, 1100), st.floats(-10, 60), st.floats(0, 5000), st.floats(-3000, 3000), st.booleans(),
       st.floats(0, 5000))
def test_power_balance_every_step(irr, tmp, load, batt, on, target):
    s = PlantState.initial(CFG)
    for k in range(3):
        s = plant_step(s, PlantInputs(batt, target, (on,)), WeatherSample(k, irr, tmp), load, CFG)
        check_state(s, CFG)
        assert s.p_grid_w == s.p_pv_w - s.p_load_w - s.p_batt_w


def test_bound_plant_matches_pure_step():
    model = build_home_model(CFG)
    plant = Plant(model, CFG)
    pure = PlantState.initial(CFG)
    inputs = PlantInputs(batt_setpoint_w=-250.0, inverter_target_w=1500.0, switch_on=(True,))
    plant.commands = {im.BAT_SPT: -250.0, im.INV_SET: 1500.0, im.switch_ctl_ref(0): True}
    for k in range(30):
        w = WeatherSample(float(k), 700.0, 41.0)
        got = plant.step(w, 900.0)
        pure = plant_step(pure, inputs, w, 900.0, CFG)
        assert got == pure
    assert model.read_value(im.GRID_W)[0] == DataValue.float32(pure.p_grid_w)
    assert model.read_value(im.BAT_SOC)[0] == DataValue.float32(pure.soc * 100)
    assert model.read_value(im.switch_power_ref(0))[0] == DataValue.float32(700.0)


def test_latch_from_model_uses_controller_values():
    model = build_home_model(CFG)
    plant = Plant(model, CFG)
    model.write_value(im.BAT_SPT, DataValue.float32(123.0), im.Channel.CONTROLLER)
    plant.latch_from_model()
    assert plant.inputs().batt_setpoint_w == 123.0
    assert plant.inputs().inverter_target_w == 4000.0


def test_check_state_reports_violations():
    bad = PlantState(p_pv_w=10, p_load_w=0, p_batt_w=0, p_grid_w=9, p_pv_mppt_w=10)
    with pytest.raises(AssertionError, match="balance"):
        check_state(bad, CFG)


def test_determinism():
    def run():
        s = PlantState.initial(CFG)
        out = []
        for k in range(200):
            s = plant_step(s, PlantInputs(400.0 * math.sin(k), 3000.0, (k % 7 == 0,)),
                           WeatherSample(k, 600 + k, 30), 1000 + k, CFG)
            out.append(s)
        return out

    assert run() == run()
