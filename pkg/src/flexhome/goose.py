"""GOOSE-like state-change messaging.

Wire frame (big-endian)::

    magic "GSE1" | version u8 = 1 | appId u16 | goIdLen u8 | goId UTF-8
    | stNum u32 | sqNum u32 | timestampUs u64 | ttlMs u32
    | numEntries u16 | entries (TLV, see ``values``)

A publisher bumps ``stNum`` and resets ``sqNum`` on every state change, then
retransmits the same payload on a doubling schedule (4, 8, 16 ... ms) capped
at the heartbeat period. Each frame's ``ttlMs`` is twice the gap to the next
frame, so a subscriber can flag a publisher as stale when that time passes
without traffic.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .values import (CodecError, DataValue, Reader, Truncated, UnsupportedVariant,
                     decode_value, encode_value)

log = logging.getLogger(__name__)

MAGIC = b"GSE1"
VERSION = 0x01
DEFAULT_GROUP = "239.61.8.50"
DEFAULT_PORT = 10285

_HEAD = struct.Struct(">4sBHB")
_COUNTERS = struct.Struct(">IIQIH")


class BadMagic(CodecError):
    pass


class BadVersion(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class GoIdTooLong(CodecError):
    pass


class TransportDown(RuntimeError):
    pass


@dataclass(frozen=True)
class GooseFrame:
    app_id: int
    go_id: str
    st_num: int
    sq_num: int
    timestamp_us: int
    ttl_ms: int
    entries: Tuple[DataValue, ...] = ()


def encode_frame(f: GooseFrame) -> bytes:
    gid = f.go_id.encode("utf-8")
    if len(gid) > 255:
        raise GoIdTooLong(f"goId is {len(gid)} bytes, limit 255")
    if f.ttl_ms <= 0:
        raise CodecError("ttlMs must be positive")
    try:
        head = _HEAD.pack(MAGIC, VERSION, f.app_id, len(gid))
        counters = _COUNTERS.pack(f.st_num, f.sq_num, f.timestamp_us, f.ttl_ms, len(f.entries))
    except struct.error as exc:
        raise CodecError(f"field out of range: {exc}") from exc
    return b"".join([head, gid, counters] + [encode_value(v) for v in f.entries])


def decode_frame(data: bytes) -> GooseFrame:
    r = Reader(bytes(data))
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    version = r.u8()
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    app_id = r.u16()
    gid_len = r.u8()
    try:
        go_id = r.take(gid_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CodecError("goId is not UTF-8") from exc
    st, sq, ts, ttl, n = _COUNTERS.unpack(r.take(_COUNTERS.size))
    entries = tuple(decode_value(r) for _ in range(n))
    if r.remaining():
        raise TrailingBytes(f"{r.remaining()} bytes after last entry")
    return GooseFrame(app_id, go_id, st, sq, ts, ttl, entries)


@dataclass(frozen=True)
class RetransmitSchedule:
    first_ms: int = 4
    heartbeat_ms: int = 1000

    def __post_init__(self):
        if not 0 < self.first_ms <= self.heartbeat_ms:
            raise ValueError("need 0 < first_ms <= heartbeat_ms")

    @cached_property
    def intervals_ms(self) -> Tuple[int, ...]:
        out = [self.first_ms]
        while out[-1] < self.heartbeat_ms:
            out.append(min(out[-1] * 2, self.heartbeat_ms))
        return tuple(out)

    def interval(self, k: int) -> int:
        """Gap after the frame with sqNum ``k``; the last interval repeats forever."""
        iv = self.intervals_ms
        return iv[min(k, len(iv) - 1)]


# -- transports ---------------------------------------------------------------

Receiver = Callable[[bytes, float], None]


class InProcessBus:
    """Synchronous, deterministic stand-in for the multicast segment."""

    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self._receivers: List[Receiver] = []
        self.closed = False
        self.sent = 0

    def add_receiver(self, fn: Receiver) -> None:
        self._receivers.append(fn)

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportDown("bus closed")
        self.sent += 1
        now = self.clock()
        for fn in list(self._receivers):
            fn(data, now)

    def close(self) -> None:
        self.closed = True


class UdpMulticastTransport:
    """UDP multicast sender/receiver pair, by default on the loopback interface."""

    def __init__(self, group: str = DEFAULT_GROUP, port: int = DEFAULT_PORT, iface: str = "127.0.0.1",
                 ttl: int = 1):
        self.group, self.port, self.iface = group, port, iface
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        self._tx.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(iface))
        self._tx.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        self._tx.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, ttl)
        self._rx: List[socket.socket] = []
        self._threads: List[threading.Thread] = []
        self.closed = False

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportDown("transport closed")
        try:
            self._tx.sendto(data, (self.group, self.port))
        except OSError as exc:
            raise TransportDown(str(exc)) from exc

    def open_socket(self) -> socket.socket:
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        s.bind(("", self.port))
        mreq = struct.pack("4s4s", socket.inet_aton(self.group), socket.inet_aton(self.iface))
        s.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
        s.settimeout(0.2)
        return s

    def add_receiver(self, fn: Receiver) -> None:
        s = self.open_socket()
        self._rx.append(s)

        def loop() -> None:
            while not self.closed:
                try:
                    data, _ = s.recvfrom(65535)
                except socket.timeout:
                    continue
                except OSError:
                    break
                fn(data, time.monotonic())

        t = threading.Thread(target=loop, name=f"goose-rx-{self.port}", daemon=True)
        t.start()
        self._threads.append(t)

    def close(self) -> None:
        self.closed = True
        for t in self._threads:
            t.join(timeout=1.0)
        for s in self._rx:
            s.close()
        self._tx.close()


# -- publisher ------------------------------------------------------------------

def _wall_us() -> int:
    return time.time_ns() // 1000


class GoosePublisher:
    def __init__(self, transport, go_id: str, app_id: int = 1,
                 schedule: RetransmitSchedule = RetransmitSchedule(),
                 clock: Callable[[], float] = time.monotonic,
                 wallclock_us: Callable[[], int] = _wall_us):
        if len(go_id.encode("utf-8")) > 255:
            raise GoIdTooLong(go_id)
        self.transport = transport
        self.go_id = go_id
        self.app_id = app_id
        self.schedule = schedule
        self.clock = clock
        self.wallclock_us = wallclock_us
        self.st_num = 0
        self.sq_num = 0
        self.entries: Tuple[DataValue, ...] = ()
        self._t_change_us = 0
        self._next_due: Optional[float] = None
        self._cond = threading.Condition(threading.Lock())
        self._thread: Optional[threading.Thread] = None
        self._stopping = False

    def _frame(self) -> GooseFrame:
        ttl = 2 * self.schedule.interval(self.sq_num)
        return GooseFrame(self.app_id, self.go_id, self.st_num, self.sq_num, self._t_change_us, ttl, self.entries)

    def _send(self, frame: GooseFrame) -> None:
        if getattr(self.transport, "closed", False):
            raise TransportDown("transport closed")
        self.transport.send(encode_frame(frame))

    def publish_state_change(self, entries: Sequence[DataValue]) -> GooseFrame:
        with self._cond:
            self.st_num = self.st_num + 1 if self.st_num < 0xFFFFFFFF else 1
            self.sq_num = 0
            self.entries = tuple(entries)
            self._t_change_us = self.wallclock_us()
            frame = self._frame()
            data = encode_frame(frame)
            self._next_due = self.clock() + self.schedule.interval(0) / 1000.0
            self._cond.notify_all()
            if getattr(self.transport, "closed", False):
                raise TransportDown("transport closed")
            self.transport.send(data)
        return frame

    def heartbeat_tick(self, now: Optional[float] = None) -> Optional[GooseFrame]:
        """Emit the next retransmission if it is due at ``now``."""
        with self._cond:
            if self._next_due is None:
                return None
            now = self.clock() if now is None else now
            if now < self._next_due:
                return None
            self.sq_num = self.sq_num + 1 if self.sq_num < 0xFFFFFFFF else 1
            frame = self._frame()
            gap = self.schedule.interval(self.sq_num) / 1000.0
            self._next_due += gap
            if self._next_due < now:
                # fell more than a whole interval behind; resynchronise rather than burst
                self._next_due = now + gap
            self._send(frame)
        return frame

    @property
    def next_due(self) -> Optional[float]:
        return self._next_due

    # real-time retransmission thread

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stopping = False
        self._thread = threading.Thread(target=self._run, name=f"goose-pub-{self.go_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None

    def _run(self) -> None:
        while True:
            with self._cond:
                if self._stopping:
                    return
                due = self._next_due
                if due is None:
                    self._cond.wait()
                    continue
                remaining = due - self.clock()
                if remaining > 0.003:
                    self._cond.wait(remaining - 0.002)
                    continue
            # fine wait outside the lock; short sleeps keep the GIL available
            while True:
                remaining = due - self.clock()
                if remaining <= 0:
                    break
                time.sleep(min(remaining, 0.0002))
            try:
                self.heartbeat_tick()
            except TransportDown:
                log.warning("goose publisher %s: transport down, stopping", self.go_id)
                return


def bind_dataset(model, dataset_name: str, publisher: GoosePublisher, publish_initial: bool = True):
    """Publish a state change whenever a member of the dataset changes.

    Returns a function that detaches the publisher from the model.
    """
    ds = model.dataset(dataset_name)
    members = {str(m) for m in ds.members}

    def on_change(changes) -> None:
        if any(str(ref) in members for ref, _, _ in changes):
            publisher.publish_state_change([v for v, _ in model.snapshot(dataset_name)])

    remove = model.add_listener(on_change)
    if publish_initial:
        publisher.publish_state_change([v for v, _ in model.snapshot(dataset_name)])
    return remove


# -- subscriber -----------------------------------------------------------------

class GooseSubscriber:
    def __init__(self, clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self._callbacks: Dict[str, Callable[[GooseFrame], None]] = {}
        self._last_rx: Dict[str, float] = {}
        self._last_ttl: Dict[str, int] = {}
        self._delivered: Dict[str, Tuple[int, Tuple[DataValue, ...]]] = {}
        self._lock = threading.Lock()
        self.decode_errors = 0
        self.received = 0

    def subscribe(self, go_id: str, callback: Callable[[GooseFrame], None]) -> None:
        with self._lock:
            self._callbacks[go_id] = callback

    def attach(self, transport) -> "GooseSubscriber":
        transport.add_receiver(self.on_frame)
        return self

    def on_frame(self, data: bytes, rx_time: Optional[float] = None) -> None:
        try:
            frame = decode_frame(data)
        except CodecError:
            self.decode_errors += 1
            return
        self.deliver(frame, self.clock() if rx_time is None else rx_time)

    def deliver(self, frame: GooseFrame, rx_time: float) -> None:
        with self._lock:
            cb = self._callbacks.get(frame.go_id)
            if cb is None:
                return
            self.received += 1
            self._last_rx[frame.go_id] = rx_time
            self._last_ttl[frame.go_id] = frame.ttl_ms
            key = (frame.st_num, frame.entries)
            if self._delivered.get(frame.go_id) == key:
                return
            self._delivered[frame.go_id] = key
            cb(frame)

    def check_stale(self, now: Optional[float] = None) -> List[str]:
        now = self.clock() if now is None else now
        with self._lock:
            return sorted(g for g, t in self._last_rx.items()
                          if g in self._callbacks and (now - t) * 1000.0 > self._last_ttl[g])


def publish_state_change(pub: GoosePublisher, snapshot: Sequence[DataValue]) -> GooseFrame:
    return pub.publish_state_change(snapshot)


def heartbeat_tick(pub: GoosePublisher, now: Optional[float] = None) -> Optional[GooseFrame]:
    return pub.heartbeat_tick(now)


def subscribe(sub: GooseSubscriber, go_id: str, callback: Callable[[GooseFrame], None]) -> None:
    sub.subscribe(go_id, callback)


def check_stale(sub: GooseSubscriber, now: Optional[float] = None) -> List[str]:
    return sub.check_stale(now)


__all__ = [
    "BadMagic", "BadVersion", "CodecError", "GoIdTooLong", "GooseFrame", "GoosePublisher",
    "GooseSubscriber", "InProcessBus", "RetransmitSchedule", "TrailingBytes", "TransportDown",
    "Truncated", "UdpMulticastTransport", "UnsupportedVariant", "bind_dataset", "check_stale",
    "decode_frame", "encode_frame", "heartbeat_tick", "publish_state_change", "subscribe",
]
