import pytest

from flexhome.traces import (ClearSkyWeather, CsvWeather, DayParams, IngestError, LoadEvent, SeriesTrace,
                             SyntheticLoad, clearsky_irradiance, clearsky_weather, load_trace, read_series_csv)

import oracles

DAY = DayParams()


def test_noon_and_night():
    assert clearsky_irradiance(DAY.solar_noon_s, DAY) == 1000.0
    assert clearsky_irradiance(3 * 3600, DAY) == 0.0
    assert clearsky_irradiance(DAY.sunset_s, DAY) == 0.0
    assert clearsky_irradiance(86400 + DAY.solar_noon_s, DAY) == 1000.0


def test_irradiance_matches_oracle():
    for t in range(0, 86400, 611):
        assert clearsky_irradiance(t, DAY) == pytest.approx(oracles.irradiance(t), rel=1e-12, abs=1e-12)


def test_weather_series_and_panel_temperature():
    series = clearsky_weather(DAY, 12 * 3600, 10, 1)
    assert len(series) == 10
    for s in series:
        assert s.pnl_tmp_c == pytest.approx(DAY.amb_c + 0.03 * s.irr_wm2)
    with pytest.raises(ValueError):
        ClearSkyWeather(DayParams(sunrise_s=10, sunset_s=5))


def test_event_adds_to_base():
    trace = load_trace(1000.0, [LoadEvent(100, 60, 400)], 90, 80, 1)
    assert trace[:10] == [1000.0] * 10
    assert trace[10:70] == [1400.0] * 60
    assert trace[70:] == [1000.0] * 10


def test_jitter_is_seeded():
    a = SyntheticLoad(1000, jitter_w=50, seed=3)
    b = SyntheticLoad(1000, jitter_w=50, seed=3)
    xs = [a.at(t) for t in range(100)]
    assert xs == [b.at(t) for t in range(100)]
    assert len(set(xs)) > 90


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_roundtrip_and_interpolation(tmp_path):
    p = write(tmp_path, "t_s,value\n0,0\n10,100\n\n20,50\n")
    t, v = read_series_csv(p)
    assert list(t) == [0, 10, 20] and list(v) == [0, 100, 50]
    s = SeriesTrace.from_csv(p)
    assert s.at(5) == 50 and s.at(15) == 75 and s.at(-3) == 0 and s.at(99) == 50


@pytest.mark.parametrize("text, line", [
    ("time,value\n0,1\n", 1),
    ("t_s,value\n0,1\n1,x\n", 3),
    ("t_s,value\n0,1\n1,2,3\n", 3),
    ("t_s,value\n0,1\n0,2\n", 3),
    ("t_s,value\n0,nan\n", 2),
])
def test_csv_errors_carry_line(tmp_path, text, line):
    with pytest.raises(IngestError) as exc:
        read_series_csv(write(tmp_path, text))
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_csv_without_rows(tmp_path):
    with pytest.raises(IngestError):
        read_series_csv(write(tmp_path, "t_s,value\n"))


def test_csv_weather_rejects_negative_irradiance(tmp_path):
    irr = SeriesTrace.from_csv(write(tmp_path, "t_s,value\n0,-5\n1,10\n", "irr.csv"))
    tmp = SeriesTrace.from_csv(write(tmp_path, "t_s,value\n0,20\n", "tmp.csv"))
    w = CsvWeather(irr, tmp)
    assert w.at(1).irr_wm2 == 10 and w.at(1).pnl_tmp_c == 20
    with pytest.raises(IngestError):
        w.at(0)
