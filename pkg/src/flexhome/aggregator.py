"""Community-level coordination on top of the ledger.

Every interval the aggregator seals the capacity reports it has received,
splits the community's needed counteraction among prosumers in proportion to
their symmetric capacity, and appends one dispatch block. Prosumers find their
setpoint by scanning blocks they have not seen yet.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .ledger import CapacityReport, Chain, ChainLog, MeasurementReport, SetpointDispatch, Tx
from .plant import PlantConfig, pv_mppt_power
from .traces import DayParams, IngestError, clearsky_irradiance

INTERVAL_S = 900


class EmptyCapacities(ValueError):
    pass


class DuplicateProsumer(ValueError):
    pass


def collect_capacities(chain: Union[Chain, Iterable], interval_idx: int) -> Dict[str, Tuple[float, float]]:
    """Latest capacity per prosumer for ``interval_idx``; later blocks and txs win."""
    out: Dict[str, Tuple[float, float]] = {}
    for block in chain:
        for tx in block.txs:
            if isinstance(tx, CapacityReport) and tx.interval_idx == interval_idx:
                out[tx.prosumer_id] = (tx.p_min_w, tx.p_max_w)
    return out


def allocate_setpoints(p_rec_w: float, capacities: Mapping[str, Tuple[float, float]],
                       target_w: float = 0.0) -> Dict[str, float]:
    """Split ``target_w − p_rec_w`` across prosumers, clamping and redistributing.

    Weights are the symmetric capacity ``min(|pMin|, pMax)``. Prosumers whose
    share would exceed a bound are pinned to it and the rest is shared again
    among the others. If no unpinned prosumer has symmetric capacity left, the
    remainder is shared by headroom in the needed direction instead.
    """
    if not capacities:
        raise EmptyCapacities("no capacities to allocate against")
    need = target_w - p_rec_w
    alloc = {pid: 0.0 for pid in capacities}
    if need == 0:
        return alloc
    free = list(capacities)
    remaining = need
    for _ in range(len(capacities) + 1):
        weights = {pid: min(-capacities[pid][0], capacities[pid][1]) for pid in free}
        total = sum(weights.values())
        if total <= 0:
            weights = {pid: (capacities[pid][1] if need > 0 else -capacities[pid][0]) for pid in free}
            total = sum(weights.values())
            if total <= 0:
                break
        pinned = []
        for pid in free:
            lo, hi = capacities[pid]
            share = remaining * weights[pid] / total
            if share > hi or share < lo:
                pinned.append(pid)
        if not pinned:
            for pid in free:
                alloc[pid] = remaining * weights[pid] / total
            break
        for pid in pinned:
            lo, hi = capacities[pid]
            alloc[pid] = hi if need > 0 else lo
            remaining -= alloc[pid]
            free.remove(pid)
        if not free:
            break
    return alloc


def dispatch(chain: Union[Chain, ChainLog], allocations, interval_idx: int, now_us: int):
    """Append one block of SetpointDispatch txs; returns it, or None when there is nothing to send."""
    pairs = list(allocations.items()) if isinstance(allocations, Mapping) else list(allocations)
    seen = set()
    for pid, _ in pairs:
        if pid in seen:
            raise DuplicateProsumer(pid)
        seen.add(pid)
    if not pairs:
        return None
    txs = [SetpointDispatch(pid, interval_idx, float(p)) for pid, p in pairs]
    return chain.append(txs, now_us)


# -- community profile ---------------------------------------------------------------

@dataclass(frozen=True)
class RecProfile:
    p_rec_w: Tuple[float, ...]
    interval_s: int = INTERVAL_S
    first_idx: int = 0

    def at(self, interval_idx: int) -> float:
        k = interval_idx - self.first_idx
        if not 0 <= k < len(self.p_rec_w):
            raise IndexError(f"interval {interval_idx} outside profile")
        return self.p_rec_w[k]

    def for_time(self, t_s: float) -> float:
        """Value for the interval containing time-of-day ``t_s``, wrapping over the profile length."""
        k = int((t_s % 86400.0) // self.interval_s)
        return self.p_rec_w[(k - self.first_idx) % len(self.p_rec_w)]


def rec_profile_synth(n_houses: int = 35, pv_fraction: float = 0.6, day: DayParams = DayParams(),
                      base_load_w: float = 600.0, plant: PlantConfig = PlantConfig(),
                      interval_s: int = INTERVAL_S, sample_s: float = 1.0) -> RecProfile:
    """Net community exchange per interval, averaged from ``sample_s`` samples."""
    if n_houses < 1:
        raise ValueError("n_houses must be at least 1")
    if not 0 <= pv_fraction <= 1:
        raise ValueError("pv_fraction must be in [0, 1]")
    n_int = int(86400 // interval_s)
    per = int(round(interval_s / sample_s))
    t = np.arange(n_int * per) * sample_s
    irr = np.array([clearsky_irradiance(x, day) for x in t])
    pv = np.array([pv_mppt_power(g, day.amb_c + 0.03 * g, plant) for g in irr])
    net = n_houses * pv_fraction * pv - n_houses * base_load_w
    means = net.reshape(n_int, per).mean(axis=1)
    return RecProfile(tuple(float(x) for x in means), interval_s)


def read_rec_csv(path, interval_s: int = INTERVAL_S) -> RecProfile:
    path = Path(path)
    idx: List[int] = []
    vals: List[float] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["interval_idx", "p_rec_w"]:
            raise IngestError(f"{path}: expected header 'interval_idx,p_rec_w'", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise IngestError(f"{path}: expected 2 columns", lineno)
            try:
                k, v = int(row[0]), float(row[1])
            except ValueError:
                raise IngestError(f"{path}: malformed row {row!r}", lineno) from None
            if not math.isfinite(v):
                raise IngestError(f"{path}: non-finite p_rec_w", lineno)
            if idx and k != idx[-1] + 1:
                raise IngestError(f"{path}: interval {k} does not follow {idx[-1]}", lineno)
            idx.append(k)
            vals.append(v)
    if not idx:
        raise IngestError(f"{path}: no data rows")
    return RecProfile(tuple(vals), interval_s, idx[0])


# -- processes --------------------------------------------------------------------------

@dataclass
class Participant:
    prosumer_id: str
    p_min_w: float = -2000.0
    p_max_w: float = 2000.0

    def report(self, interval_idx: int) -> CapacityReport:
        return CapacityReport(self.prosumer_id, interval_idx, self.p_min_w, self.p_max_w)


@dataclass
class IntervalOutcome:
    interval_idx: int
    p_rec_w: float
    target_w: float
    allocations: Dict[str, float]


class Aggregator:
    """Single writer of the chain.

    ``submit`` queues transactions from prosumers; ``run_interval`` seals them
    and dispatches setpoints for one interval. ``others`` are community members
    simulated as fixed-capacity reporters.
    """

    def __init__(self, chain: Union[Chain, ChainLog], profile: RecProfile, others: Sequence[Participant] = (),
                 target: Optional[RecProfile] = None):
        self.chain = chain
        self.profile = profile
        self.others = list(others)
        self.target = target
        self.pending: List[Tx] = []
        self.outcomes: List[IntervalOutcome] = []

    @property
    def blocks(self) -> Chain:
        return self.chain.chain if isinstance(self.chain, ChainLog) else self.chain

    def submit(self, tx: Tx) -> None:
        self.pending.append(tx)

    def run_interval(self, interval_idx: int, interval_start_s: float, now_us: int) -> IntervalOutcome:
        txs = self.pending + [p.report(interval_idx) for p in self.others]
        self.pending = []
        self.chain.append(txs, now_us)
        caps = collect_capacities(self.blocks, interval_idx)
        p_rec = self.profile.for_time(interval_start_s)
        target = self.target.for_time(interval_start_s) if self.target is not None else 0.0
        alloc = allocate_setpoints(p_rec, caps, target) if caps else {}
        dispatch(self.chain, sorted(alloc.items()), interval_idx, now_us)
        out = IntervalOutcome(interval_idx, p_rec, target, alloc)
        self.outcomes.append(out)
        return out


class DispatchReader:
    """A prosumer's view of the chain: picks up its own setpoints from new blocks."""

    def __init__(self, chain: Union[Chain, ChainLog], prosumer_id: str):
        self.chain = chain
        self.prosumer_id = prosumer_id
        self.seen = 0
        self.setpoints: Dict[int, float] = {}

    def scan(self) -> int:
        blocks = self.chain.chain.blocks if isinstance(self.chain, ChainLog) else self.chain.blocks
        new = blocks[self.seen:]
        for block in new:
            for tx in block.txs:
                if isinstance(tx, SetpointDispatch) and tx.prosumer_id == self.prosumer_id:
                    self.setpoints[tx.interval_idx] = tx.p_ref_w
        self.seen = len(blocks)
        return len(new)

    def reference(self, interval_idx: int) -> Optional[float]:
        return self.setpoints.get(interval_idx)


@dataclass
class IntervalAccumulator:
    """Per-interval tracking statistics a prosumer reports back."""
    interval_idx: int
    dt_s: float
    n: int = 0
    error_kwh: float = 0.0
    grid_sum_w: float = 0.0
    p_ref_w: float = 0.0

    def add(self, p_grid_w: float, p_ref_w: float) -> None:
        self.n += 1
        self.p_ref_w = p_ref_w
        self.grid_sum_w += p_grid_w
        self.error_kwh += abs(p_grid_w - p_ref_w) * self.dt_s / 3.6e6

    @property
    def mean_p_grid_w(self) -> float:
        return self.grid_sum_w / self.n if self.n else 0.0

    def report(self, prosumer_id: str) -> MeasurementReport:
        return MeasurementReport(prosumer_id, self.interval_idx, self.error_kwh, self.mean_p_grid_w)
