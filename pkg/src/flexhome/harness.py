"""Scenario runner.

Wires model → plant → GOOSE/ACSI → bridges → broker → HEMS (→ aggregator for
the market scenario), advances the simulation clock, and writes a per-step
CSV plus a metrics JSON file.

In ``inprocess`` mode every transport is synchronous and time is simulated,
so identical configurations give byte-identical output. ``network`` mode runs
the real multicast, TCP and HTTP transports and paces steps to the wall clock.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import acsi, bridges, broker, goose
from . import iec_model as im
from .aggregator import (Aggregator, DispatchReader, IntervalAccumulator, Participant, RecProfile, read_rec_csv,
                         rec_profile_synth)
from .config import RunConfig
from .hems import Hems
from .ledger import CapacityReport, ChainLog
from .plant import Plant, PlantState, check_state
from .traces import ClearSkyWeather, CsvWeather, SeriesTrace, SyntheticLoad

log = logging.getLogger(__name__)

CSV_HEADER = "t_s,p_load_w,p_pv_w,p_pv_mppt_w,p_batt_w,p_grid_w,p_ref_w,soc_pct,switch_state"
COMMAND_DATASET = "Commands"
MIRROR_DATASET = "Mirror"
COMMAND_GO_ID = "HEMS/Commands"


class InvariantViolation(AssertionError):
    pass


class SimClock:
    """Simulation time in integer microseconds."""

    def __init__(self, t_us: int = 0):
        self.t_us = t_us

    def us(self) -> int:
        return self.t_us

    def seconds(self) -> float:
        return self.t_us / 1e6


@dataclass
class IntervalRow:
    interval_idx: int
    p_ref_w: float
    mean_p_grid_w: float
    energy_error_kwh: float


@dataclass
class RunMetrics:
    scenario: str
    steps: int
    energy_error_kwh: float
    injected_kwh: float
    absorbed_kwh: float
    switch_on_s: float
    soc_start: float
    soc_end: float
    per_interval: List[IntervalRow] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class RunResult:
    metrics: RunMetrics
    csv_path: Path
    metrics_path: Path
    ledger_path: Optional[Path] = None


def csv_row(s: PlantState, p_ref_w: float) -> str:
    return ",".join((repr(s.t_s), repr(s.p_load_w), repr(s.p_pv_w), repr(s.p_pv_mppt_w), repr(s.p_batt_w),
                     repr(s.p_grid_w), repr(p_ref_w), repr(s.soc * 100.0), str(int(any(s.switch_on)))))


def command_members(cfg: RunConfig) -> List[str]:
    return [im.BAT_SPT, im.INV_SET] + [im.switch_ctl_ref(i) for i in range(len(cfg.plant.switchable_loads))]


def mirror_members(model: im.ServerModel) -> List[str]:
    return [str(r) for r in model.references() if not bridges.is_command_attr(bridges.path_to_entity(r)[1])]


class CommandLink:
    """GOOSE subscription that latches command frames into the plant."""

    def __init__(self, plant: Plant, members: List[str], publisher: goose.GoosePublisher,
                 clock: Callable[[], float]):
        self.plant = plant
        self.members = members
        self.publisher = publisher
        self.delivered_st = 0
        self._cond = threading.Condition()
        self.subscriber = goose.GooseSubscriber(clock)
        self.subscriber.subscribe(publisher.go_id, self._on_frame)

    def _on_frame(self, frame: goose.GooseFrame) -> None:
        for ref, value in zip(self.members, frame.entries):
            self.plant.latch(ref, value)
        with self._cond:
            self.delivered_st = frame.st_num
            self._cond.notify_all()

    def sync(self, timeout: float = 0.5) -> bool:
        """Wait until the latest published state has reached the plant."""
        with self._cond:
            ok = self._cond.wait_for(lambda: self.delivered_st == self.publisher.st_num, timeout)
        if not ok:
            log.warning("command frame st=%d not received in time; reading model", self.publisher.st_num)
            self.plant.latch_from_model()
        return ok


class Scenario:
    """Everything wired for one run; :meth:`close` releases network resources."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = out_dir
        self.network = cfg.transports.mode == "network"
        self.clock = SimClock(int(round(cfg.start_s * 1e6)))
        self._closers: List[Callable[[], None]] = []

        self.weather = self._weather()
        self.load, self.forecast = self._load()

        self.model = im.build_home_model(cfg.plant, self.clock.us)
        cmd = command_members(cfg)
        self.model.define_dataset(COMMAND_DATASET, cmd)
        mirror = mirror_members(self.model)
        self.model.define_dataset(MIRROR_DATASET, mirror)
        self.plant = Plant(self.model, cfg.plant, cfg.start_s)

        t = cfg.transports
        if self.network:
            tx = goose.UdpMulticastTransport(t.goose_group, t.goose_port, t.goose_iface)
            rx = goose.UdpMulticastTransport(t.goose_group, t.goose_port, t.goose_iface)
            self._closers += [tx.close, rx.close]
            self.publisher = goose.GoosePublisher(tx, COMMAND_GO_ID)
            self.link = CommandLink(self.plant, cmd, self.publisher, time.monotonic)
            self.link.subscriber.attach(rx)
            self.publisher.start()
            self._closers.append(self.publisher.stop)
        else:
            bus = goose.InProcessBus(self.clock.seconds)
            self.publisher = goose.GoosePublisher(bus, COMMAND_GO_ID, clock=self.clock.seconds,
                                                  wallclock_us=self.clock.us)
            self.link = CommandLink(self.plant, cmd, self.publisher, self.clock.seconds)
            self.link.subscriber.attach(bus)
        goose.bind_dataset(self.model, COMMAND_DATASET, self.publisher)

        self.server = acsi.AcsiServer(self.model, port=t.acsi_port if self.network else 0,
                                      report_clock=None if self.network else self.clock.seconds)
        if self.network:
            self.server.start()
            self._closers.append(self.server.stop)
            self.conn = acsi.AcsiClient("127.0.0.1", self.server.port)
            self._closers.append(self.conn.close)
        else:
            self.conn = acsi.LocalAcsiClient(self.server, encode=False)

        self.store = None
        if t.bridge:
            self._start_bridge(mirror)

        self.hems = Hems(self.conn, cfg.scenario, cfg.plant, cfg.preferences, cfg.hems.load_control)
        self.hems.p_ref_w = cfg.hems.p_ref_w

        self.aggregator: Optional[Aggregator] = None
        self.ledger_path: Optional[Path] = None
        if cfg.scenario == "market":
            self._start_aggregator()

    # wiring helpers ------------------------------------------------------------------

    def _weather(self):
        tr = self.cfg.traces
        if tr.weather == "csv":
            return CsvWeather(SeriesTrace.from_csv(self.cfg.resolve(tr.irr_csv)),
                              SeriesTrace.from_csv(self.cfg.resolve(tr.tmp_csv)))
        return ClearSkyWeather(tr.day)

    def _load(self):
        tr = self.cfg.traces
        if tr.load_csv:
            series = SeriesTrace.from_csv(self.cfg.resolve(tr.load_csv))
            events = tr.load_events

            def csv_load(t: float) -> float:
                return series.at(t) + sum(e.watts for e in events if e.active(t))
            return csv_load, csv_load
        src = SyntheticLoad(tr.load_base_w, tr.load_events, tr.load_jitter_w, self.cfg.seed)
        return src.at, src.deterministic

    def _start_bridge(self, mirror: List[str]) -> None:
        t = self.cfg.transports
        snapshot = str(self.cfg.resolve(t.broker_snapshot)) if t.broker_snapshot else None
        if self.network:
            self.store = broker.EntityStore(persist_path=snapshot)
            srv = broker.BrokerServer(self.store, port=t.broker_port).start()
            endpoint = bridges.NotificationEndpoint()
            self._closers += [self.store.close, srv.stop, endpoint.close]
            client = broker.BrokerClient(srv.url)
            bridge_conn = acsi.AcsiClient("127.0.0.1", self.server.port)
            self._closers.append(bridge_conn.close)
        else:
            self.store = broker.EntityStore(clock_us=self.clock.us, notifier=broker.Notifier(synchronous=True),
                                            persist_path=snapshot)
            self._closers.append(self.store.close)
            endpoint = None
            client = broker.LocalBrokerClient(self.store)
            bridge_conn = acsi.LocalAcsiClient(self.server, encode=False)
        period = 0 if self.network else t.bridge_period_ms
        self.bridge = bridges.Iec61850Agent(client, bridge_conn, {MIRROR_DATASET: mirror}, period)
        self.bridge.start(endpoint)

    def _start_aggregator(self) -> None:
        a = self.cfg.aggregator
        plant = self.cfg.plant
        if a.rec_csv:
            profile = read_rec_csv(self.cfg.resolve(a.rec_csv), a.interval_s)
        else:
            profile = rec_profile_synth(a.n_houses, a.pv_fraction, self.cfg.traces.day, a.base_load_w, plant,
                                        a.interval_s)
        target: Optional[RecProfile] = read_rec_csv(self.cfg.resolve(a.target_csv), a.interval_s) \
            if a.target_csv else None
        self.ledger_path = self.out_dir / "ledger.bin"
        if self.ledger_path.exists():
            self.ledger_path.unlink()
        chain = ChainLog(self.ledger_path, self.clock.us())
        self._closers.append(chain.close)
        others = [Participant(f"house-{i:02d}", -a.cap_w, a.cap_w) for i in range(1, a.n_houses)]
        self.aggregator = Aggregator(chain, profile, others, target)
        self.reader = DispatchReader(chain, a.prosumer_id)
        self.acc: Optional[IntervalAccumulator] = None

    def close(self) -> None:
        for fn in reversed(self._closers):
            try:
                fn()
            except Exception as exc:  # teardown must not mask the run result
                log.warning("teardown: %s", exc)
        self._closers = []

    # market plumbing -----------------------------------------------------------------

    def _interval_of(self, t_us: int) -> int:
        return t_us // int(self.cfg.aggregator.interval_s * 1e6)

    def _prepare_interval(self, k: int) -> None:
        a = self.cfg.aggregator
        start_s = k * a.interval_s
        profile = tuple(self.forecast(start_s + m) for m in range(0, a.interval_s, 60))
        self.aggregator.submit(CapacityReport(a.prosumer_id, k, -self.cfg.preferences.cap_w,
                                              self.cfg.preferences.cap_w, profile))
        self.aggregator.run_interval(k, start_s, self.clock.us())
        self.reader.scan()

    def _market_tick(self, t_us: int, first: bool) -> None:
        a = self.cfg.aggregator
        iv_us = int(a.interval_s * 1e6)
        lead_us = int(round(a.lead_s * 1e6))
        k = t_us // iv_us
        if first:
            self._prepare_interval(k)
        if t_us % iv_us == 0 or first:
            if self.acc is not None and self.acc.n:
                self.aggregator.submit(self.acc.report(a.prosumer_id))
            ref = self.reader.reference(k)
            if ref is None:
                log.warning("no setpoint dispatched for interval %d; keeping %.1f W", k, self.hems.p_ref_w)
            else:
                self.hems.p_ref_w = ref
            self.acc = IntervalAccumulator(k, self.cfg.plant.step_s)
        if (t_us + lead_us) % iv_us == 0:
            self._prepare_interval((t_us + lead_us) // iv_us)

    # stepping -------------------------------------------------------------------------

    def step(self, t_us: int, first: bool) -> PlantState:
        self.clock.t_us = t_us
        t = t_us / 1e6
        if self.aggregator is not None:
            self._market_tick(t_us, first)
        self.plant.sense(self.weather.at(t), self.load(t))
        self.hems.pre_generation(t)
        if self.network:
            self.link.sync()
        self.plant.generate()
        self.hems.post_generation(t)
        if self.network:
            self.link.sync()
        state = self.plant.store()
        if not self.network:
            self.server.tick_reports()
        if self.aggregator is not None:
            self.acc.add(state.p_grid_w, self.hems.p_ref_w)
        return state


def _interval_table(rows: List[tuple], interval_s: float, dt: float) -> List[IntervalRow]:
    table: Dict[int, List[tuple]] = {}
    for t, grid, ref in rows:
        table.setdefault(int(t // interval_s), []).append((grid, ref))
    out = []
    for k in sorted(table):
        items = table[k]
        out.append(IntervalRow(k, items[-1][1], sum(g for g, _ in items) / len(items),
                               sum(abs(g - r) for g, r in items) * dt / 3.6e6))
    return out


def run_scenario(cfg: RunConfig, out_dir, check: bool = True) -> RunResult:
    """Run one scenario and write ``run.csv`` and ``metrics.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = Scenario(cfg, out_dir)
    dt = cfg.plant.step_s
    dt_us = int(round(dt * 1e6))
    t0_us = int(round(cfg.start_s * 1e6))
    lines = [CSV_HEADER]
    rows = []
    err = inj = absd = on_s = 0.0
    soc_start = sc.plant.state.soc
    wall0 = time.monotonic()
    try:
        for k in range(cfg.n_steps):
            if sc.network:
                wait = wall0 + k * dt / cfg.transports.time_scale - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
            t_us = t0_us + k * dt_us
            state = sc.step(t_us, k == 0)
            if check:
                try:
                    check_state(state, cfg.plant)
                except AssertionError as exc:
                    raise InvariantViolation(str(exc)) from None
            ref = sc.hems.p_ref_w
            lines.append(csv_row(state, ref))
            rows.append((state.t_s, state.p_grid_w, ref))
            err += abs(state.p_grid_w - ref) * dt / 3.6e6
            inj += max(state.p_grid_w, 0.0) * dt / 3.6e6
            absd += max(-state.p_grid_w, 0.0) * dt / 3.6e6
            on_s += dt if any(state.switch_on) else 0.0
    finally:
        sc.close()
    interval_s = cfg.aggregator.interval_s if cfg.aggregator else 900
    metrics = RunMetrics(cfg.scenario, cfg.n_steps, err, inj, absd, on_s, soc_start, sc.plant.state.soc,
                         _interval_table(rows, interval_s, dt))
    csv_path = out_dir / "run.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(metrics.to_json())
    return RunResult(metrics, csv_path, metrics_path, sc.ledger_path)


def read_run_csv(path) -> Dict[str, List[float]]:
    """Columns of a run CSV as float lists."""
    lines = Path(path).read_text().splitlines()
    names = lines[0].split(",")
    cols: Dict[str, List[float]] = {n: [] for n in names}
    for line in lines[1:]:
        for n, v in zip(names, line.split(",")):
            cols[n].append(float(v))
    return cols


def energy_error_from_csv(path, dt_s: float) -> float:
    cols = read_run_csv(path)
    return sum(abs(g - r) * dt_s / 3.6e6 for g, r in zip(cols["p_grid_w"], cols["p_ref_w"]))

