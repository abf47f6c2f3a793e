"""Minimal client/server protocol exposing a ServerModel (the MMS-side interface).

Every message travels in an envelope ``length u32 | opcode u8 | payload`` where
``length`` counts the opcode and payload bytes. Requests use opcodes 0x01-0x04,
responses echo the request opcode with the high bit set and start with a status
byte, and 0x90 marks an unsolicited report push. Object references are
u16-length-prefixed UTF-8; values use the TLV encoding shared with GOOSE.
"""
from __future__ import annotations

import itertools
import logging
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Tuple, Union

from .iec_model import AccessDenied, Channel, ModelError, NotFound, ServerModel, TypeMismatch
from .values import CodecError, DataValue, Reader, decode_value, encode_text16, encode_value

log = logging.getLogger(__name__)

DEFAULT_PORT = 10203
MAX_ENVELOPE = 1 << 20


class Op(IntEnum):
    GET_DIRECTORY = 0x01
    READ = 0x02
    WRITE = 0x03
    SUBSCRIBE_REPORT = 0x04
    GET_DIRECTORY_RESP = 0x81
    READ_RESP = 0x82
    WRITE_RESP = 0x83
    SUBSCRIBE_REPORT_RESP = 0x84
    REPORT = 0x90
    PROTOCOL_ERROR = 0xFF


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    TYPE_MISMATCH = 2
    ACCESS_DENIED = 3
    PROTOCOL_ERROR = 4
    INVALID_ARGUMENT = 5


class AcsiError(Exception):
    pass


class ProtocolError(AcsiError):
    pass


class BindFailure(AcsiError):
    pass


class InvalidArgument(AcsiError, ValueError):
    pass


_STATUS_EXC = {
    Status.NOT_FOUND: NotFound,
    Status.TYPE_MISMATCH: TypeMismatch,
    Status.ACCESS_DENIED: AccessDenied,
    Status.PROTOCOL_ERROR: ProtocolError,
    Status.INVALID_ARGUMENT: InvalidArgument,
}

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_ENV = struct.Struct(">IB")


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class GetDirectory:
    prefix: str = ""


@dataclass(frozen=True)
class ReadRequest:
    ref: str


@dataclass(frozen=True)
class WriteRequest:
    ref: str
    value: DataValue


class ReportMode(IntEnum):
    ON_CHANGE = 0
    PERIODIC = 1


@dataclass(frozen=True)
class ReportControl:
    dataset: str
    mode: ReportMode = ReportMode.ON_CHANGE
    period_ms: int = 0

    def validate(self) -> "ReportControl":
        if self.mode is ReportMode.PERIODIC and self.period_ms < 10:
            raise InvalidArgument("periodic reports need period_ms >= 10")
        return self


@dataclass(frozen=True)
class SubscribeReport:
    rcb: ReportControl


@dataclass(frozen=True)
class DirectoryResponse:
    status: Status
    refs: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ReadResponse:
    status: Status
    value: Optional[DataValue] = None
    timestamp_us: int = 0


@dataclass(frozen=True)
class WriteResponse:
    status: Status


@dataclass(frozen=True)
class SubscribeResponse:
    status: Status
    report_id: int = 0


@dataclass(frozen=True)
class ReportPush:
    report_id: int
    seq: int
    dataset: str
    entries: Tuple[Tuple[DataValue, int], ...]


@dataclass(frozen=True)
class ProtocolErrorResponse:
    status: Status = Status.PROTOCOL_ERROR


Message = Union[GetDirectory, ReadRequest, WriteRequest, SubscribeReport, DirectoryResponse,
                ReadResponse, WriteResponse, SubscribeResponse, ReportPush, ProtocolErrorResponse]


def _enc_directory_resp(m: "DirectoryResponse") -> bytes:
    body = b""
    if m.status == Status.OK:
        body = _U16.pack(len(m.refs)) + b"".join(encode_text16(x) for x in m.refs)
    return bytes((m.status,)) + body


def _enc_read_resp(m: "ReadResponse") -> bytes:
    if m.status != Status.OK:
        return bytes((m.status,))
    return bytes((m.status,)) + encode_value(m.value) + _U64.pack(m.timestamp_us)


def _enc_report(m: "ReportPush") -> bytes:
    parts = [_U32.pack(m.report_id), _U32.pack(m.seq), encode_text16(m.dataset), _U16.pack(len(m.entries))]
    for v, ts in m.entries:
        parts.append(encode_value(v))
        parts.append(_U64.pack(ts))
    return b"".join(parts)


_ENCODERS = {
    GetDirectory: (Op.GET_DIRECTORY, lambda m: encode_text16(m.prefix)),
    ReadRequest: (Op.READ, lambda m: encode_text16(m.ref)),
    WriteRequest: (Op.WRITE, lambda m: encode_text16(m.ref) + encode_value(m.value)),
    SubscribeReport: (Op.SUBSCRIBE_REPORT, lambda m: encode_text16(m.rcb.dataset) + bytes((int(m.rcb.mode),))
                      + _U32.pack(m.rcb.period_ms)),
    DirectoryResponse: (Op.GET_DIRECTORY_RESP, _enc_directory_resp),
    ReadResponse: (Op.READ_RESP, _enc_read_resp),
    WriteResponse: (Op.WRITE_RESP, lambda m: bytes((m.status,))),
    SubscribeResponse: (Op.SUBSCRIBE_REPORT_RESP, lambda m: bytes((m.status,)) + (
        _U32.pack(m.report_id) if m.status == Status.OK else b"")),
    ReportPush: (Op.REPORT, _enc_report),
    ProtocolErrorResponse: (Op.PROTOCOL_ERROR, lambda m: bytes((m.status,))),
}


def encode_message(msg: Message) -> Tuple[int, bytes]:
    entry = _ENCODERS.get(type(msg))
    if entry is None:
        raise TypeError(f"not an ACSI message: {msg!r}")
    op, fn = entry
    return op, fn(msg)


_STATUSES = {int(s): s for s in Status}


def _status(r: Reader) -> Status:
    b = r.u8()
    st = _STATUSES.get(b)
    if st is None:
        raise ProtocolError(f"unknown status {b}")
    return st


def decode_message(opcode: int, payload: bytes) -> Message:
    """Parse a payload; raises ProtocolError unless it is consumed exactly."""
    r = Reader(payload)
    try:
        msg = _decode(opcode, r)
    except CodecError as exc:
        raise ProtocolError(f"malformed payload for opcode 0x{opcode:02x}: {exc}") from exc
    if r.remaining():
        raise ProtocolError(f"{r.remaining()} unexpected bytes after opcode 0x{opcode:02x} payload")
    return msg


def _dec_subscribe(r: Reader) -> SubscribeReport:
    ds = r.text16()
    mode = r.u8()
    if mode not in (0, 1):
        raise ProtocolError(f"unknown report mode {mode}")
    return SubscribeReport(ReportControl(ds, ReportMode(mode), r.u32()))


def _dec_directory_resp(r: Reader) -> DirectoryResponse:
    st = _status(r)
    if st != Status.OK:
        return DirectoryResponse(st)
    n = r.u16()
    return DirectoryResponse(st, tuple(r.text16() for _ in range(n)))


def _dec_read_resp(r: Reader) -> ReadResponse:
    st = _status(r)
    if st != Status.OK:
        return ReadResponse(st)
    v = decode_value(r)
    return ReadResponse(st, v, r.u64())


def _dec_subscribe_resp(r: Reader) -> SubscribeResponse:
    st = _status(r)
    return SubscribeResponse(st, r.u32() if st == Status.OK else 0)


def _dec_report(r: Reader) -> ReportPush:
    rid, seq = r.u32(), r.u32()
    ds = r.text16()
    n = r.u16()
    entries = []
    for _ in range(n):
        v = decode_value(r)
        entries.append((v, r.u64()))
    return ReportPush(rid, seq, ds, tuple(entries))


def _dec_write(r: Reader) -> WriteRequest:
    ref = r.text16()
    return WriteRequest(ref, decode_value(r))


_DECODERS = {
    Op.GET_DIRECTORY: lambda r: GetDirectory(r.text16()),
    Op.READ: lambda r: ReadRequest(r.text16()),
    Op.WRITE: _dec_write,
    Op.SUBSCRIBE_REPORT: _dec_subscribe,
    Op.GET_DIRECTORY_RESP: _dec_directory_resp,
    Op.READ_RESP: _dec_read_resp,
    Op.WRITE_RESP: lambda r: WriteResponse(_status(r)),
    Op.SUBSCRIBE_REPORT_RESP: _dec_subscribe_resp,
    Op.REPORT: _dec_report,
    Op.PROTOCOL_ERROR: lambda r: ProtocolErrorResponse(_status(r)),
}


def _decode(opcode: int, r: Reader) -> Message:
    fn = _DECODERS.get(opcode)
    if fn is None:
        raise ProtocolError(f"unknown opcode 0x{opcode:02x}")
    return fn(r)


def pack_envelope(msg: Message) -> bytes:
    op, payload = encode_message(msg)
    return _ENV.pack(len(payload) + 1, op) + payload


def unpack_envelope(data: bytes) -> Tuple[int, bytes]:
    """Split one complete envelope; the length field must match the buffer exactly."""
    if len(data) < _ENV.size:
        raise ProtocolError("envelope shorter than header")
    length, op = _ENV.unpack_from(data)
    if length != len(data) - 4:
        raise ProtocolError(f"length field {length} does not match {len(data) - 4} bytes")
    return op, data[_ENV.size:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def read_envelope(sock: socket.socket) -> Tuple[int, bytes]:
    length = _U32.unpack(_recv_exact(sock, 4))[0]
    if length < 1 or length > MAX_ENVELOPE:
        raise ProtocolError(f"bad envelope length {length}")
    body = _recv_exact(sock, length)
    return body[0], body[1:]


# -- server -------------------------------------------------------------------

_STATUS_OF = [(NotFound, Status.NOT_FOUND), (TypeMismatch, Status.TYPE_MISMATCH),
              (AccessDenied, Status.ACCESS_DENIED)]


def _status_for(exc: ModelError) -> Status:
    for cls, st in _STATUS_OF:
        if isinstance(exc, cls):
            return st
    return Status.INVALID_ARGUMENT


class _Report:
    def __init__(self, server: "AcsiServer", session: "Session", rid: int, rcb: ReportControl):
        self.server, self.session, self.rid, self.rcb = server, session, rid, rcb
        self.seq = 0
        self._members = {str(m) for m in server.model.dataset(rcb.dataset).members}
        self._remove: Optional[Callable[[], None]] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _push(self) -> None:
        # callers hold the model lock, so snapshots are ordered with their seq numbers
        self.seq += 1
        entries = tuple(self.server.model.snapshot(self.rcb.dataset))
        self.session.push(ReportPush(self.rid, self.seq, self.rcb.dataset, entries))

    def _on_change(self, changes) -> None:
        if any(str(ref) in self._members for ref, _, _ in changes):
            self._push()

    def activate(self) -> None:
        if self.rcb.mode is ReportMode.ON_CHANGE:
            self._remove = self.server.model.add_listener(self._on_change)
        elif self.server.report_clock is not None:
            self.next_due = self.server.report_clock() + self.rcb.period_ms / 1000.0
            self.server.clocked_reports.append(self)
        else:
            self._thread = threading.Thread(target=self._periodic, daemon=True, name=f"acsi-report-{self.rid}")
            self._thread.start()

    def _periodic(self) -> None:
        period = self.rcb.period_ms / 1000.0
        deadline = time.monotonic() + period
        while not self._stop.wait(max(0.0, deadline - time.monotonic())):
            with self.server.model.lock:
                self._push()
            deadline += period

    def cancel(self) -> None:
        self._stop.set()
        if self._remove:
            self._remove()
        if self in self.server.clocked_reports:
            self.server.clocked_reports.remove(self)


class Session:
    """One client association; ``push`` delivers an outbound message."""

    def __init__(self, push: Callable[[Message], None]):
        self.push = push
        self.reports: List[_Report] = []

    def close(self) -> None:
        for rep in self.reports:
            rep.cancel()
        self.reports.clear()


class AcsiServer:
    """Serves one model.

    With ``report_clock`` set, periodic reports follow that clock and are
    emitted by :meth:`tick_reports` instead of by timer threads, which keeps
    simulated runs deterministic.
    """

    def __init__(self, model: ServerModel, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 channel: Channel = Channel.CONTROLLER, report_clock: Optional[Callable[[], float]] = None):
        self.model = model
        self.report_clock = report_clock
        self.clocked_reports: List[_Report] = []
        self.host, self.port = host, port
        self.channel = channel
        self._ids = itertools.count(1)
        self._tcp: Optional[socketserver.ThreadingTCPServer] = None
        self._thread: Optional[threading.Thread] = None

    def handle(self, msg: Message, session: Session) -> Tuple[Message, Optional[Callable[[], None]]]:
        """Answer one request; the optional second item runs after the response is sent."""
        if isinstance(msg, GetDirectory):
            return DirectoryResponse(Status.OK, tuple(self.model.browse(msg.prefix))), None
        if isinstance(msg, ReadRequest):
            try:
                v, ts = self.model.read_value(msg.ref)
            except ModelError as exc:
                return ReadResponse(_status_for(exc)), None
            return ReadResponse(Status.OK, v, ts), None
        if isinstance(msg, WriteRequest):
            try:
                self.model.write_value(msg.ref, msg.value, self.channel)
            except ModelError as exc:
                return WriteResponse(_status_for(exc)), None
            return WriteResponse(Status.OK), None
        if isinstance(msg, SubscribeReport):
            try:
                rcb = msg.rcb.validate()
                rep = _Report(self, session, next(self._ids), rcb)
            except InvalidArgument:
                return SubscribeResponse(Status.INVALID_ARGUMENT), None
            except NotFound:
                return SubscribeResponse(Status.NOT_FOUND), None
            session.reports.append(rep)
            return SubscribeResponse(Status.OK, rep.rid), rep.activate
        raise ProtocolError(f"{type(msg).__name__} is not a request")

    def tick_reports(self) -> int:
        """Emit every clocked periodic report that is due; returns how many were sent."""
        now = self.report_clock()
        sent = 0
        with self.model.lock:
            for rep in list(self.clocked_reports):
                if now + 1e-9 >= rep.next_due:
                    rep._push()
                    sent += 1
                    period = rep.rcb.period_ms / 1000.0
                    rep.next_due += period
                    if rep.next_due <= now:
                        rep.next_due = now + period
        return sent

    def handle_bytes(self, opcode: int, payload: bytes, session: Session):
        return self.handle(decode_message(opcode, payload), session)

    # TCP service

    def start(self) -> "AcsiServer":
        server = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                server._serve_connection(self.request)

        class TCP(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        try:
            self._tcp = TCP((self.host, self.port), Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.host}:{self.port}: {exc}") from exc
        self.port = self._tcp.server_address[1]
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True, name="acsi-server")
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None

    def _serve_connection(self, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        outbox: "queue.Queue[Optional[bytes]]" = queue.Queue()

        def writer() -> None:
            while True:
                data = outbox.get()
                if data is None:
                    return
                try:
                    sock.sendall(data)
                except OSError:
                    return

        wt = threading.Thread(target=writer, daemon=True)
        wt.start()
        session = Session(lambda m: outbox.put(pack_envelope(m)))
        try:
            while True:
                try:
                    op, payload = read_envelope(sock)
                    resp, after = self.handle_bytes(op, payload, session)
                except ProtocolError as exc:
                    log.info("acsi: closing connection on protocol error: %s", exc)
                    outbox.put(pack_envelope(ProtocolErrorResponse()))
                    break
                outbox.put(pack_envelope(resp))
                if after:
                    after()
        except (ConnectionError, OSError):
            pass
        finally:
            session.close()
            outbox.put(None)
            wt.join(timeout=2.0)
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


def serve(model: ServerModel, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> AcsiServer:
    return AcsiServer(model, host, port).start()


# -- clients ------------------------------------------------------------------

ReportCallback = Callable[[ReportPush], None]


def _raise_for(status: Status, what: str) -> None:
    if status != Status.OK:
        raise _STATUS_EXC.get(status, AcsiError)(f"{what}: status {status.name}")


class _ClientBase:
    def _roundtrip(self, msg: Message) -> Message:
        raise NotImplementedError

    def read(self, ref: str) -> Tuple[DataValue, int]:
        resp = self._roundtrip(ReadRequest(str(ref)))
        _raise_for(resp.status, f"read {ref}")
        return resp.value, resp.timestamp_us

    def write(self, ref: str, value: DataValue) -> None:
        resp = self._roundtrip(WriteRequest(str(ref), value))
        _raise_for(resp.status, f"write {ref}")

    def write_status(self, ref: str, value: DataValue) -> Status:
        return self._roundtrip(WriteRequest(str(ref), value)).status

    def browse(self, prefix: str = "") -> List[str]:
        resp = self._roundtrip(GetDirectory(prefix))
        _raise_for(resp.status, f"browse {prefix!r}")
        return list(resp.refs)


class AcsiClient(_ClientBase):
    """Blocking TCP client; report pushes are dispatched on a reader thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self.timeout = timeout
        self._responses: "queue.Queue[object]" = queue.Queue()
        self._req_lock = threading.Lock()
        self._callbacks: Dict[int, ReportCallback] = {}
        self._pending_cb: Optional[ReportCallback] = None
        self.closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name="acsi-client")
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                op, payload = read_envelope(self.sock)
                msg = decode_message(op, payload)
                if isinstance(msg, ReportPush):
                    cb = self._callbacks.get(msg.report_id)
                    if cb is not None:
                        try:
                            cb(msg)
                        except Exception:
                            log.exception("acsi report callback failed")
                    continue
                if isinstance(msg, SubscribeResponse) and msg.status == Status.OK and self._pending_cb:
                    self._callbacks[msg.report_id] = self._pending_cb
                self._responses.put(msg)
        except (ConnectionError, OSError, ProtocolError) as exc:
            self._responses.put(exc)
        finally:
            self.closed = True

    def _roundtrip(self, msg: Message) -> Message:
        with self._req_lock:
            if self.closed:
                raise ConnectionError("acsi connection closed")
            self.sock.sendall(pack_envelope(msg))
            try:
                resp = self._responses.get(timeout=self.timeout)
            except queue.Empty:
                raise TimeoutError("no response from acsi server") from None
        if isinstance(resp, Exception):
            raise ConnectionError(f"acsi connection lost: {resp}")
        if isinstance(resp, ProtocolErrorResponse):
            raise ProtocolError("server reported a protocol error")
        return resp

    def subscribe_report(self, rcb: ReportControl, callback: ReportCallback) -> int:
        with self._req_lock:
            self._pending_cb = callback
        try:
            resp = self._roundtrip(SubscribeReport(rcb))
        finally:
            self._pending_cb = None
        _raise_for(resp.status, f"subscribe {rcb.dataset}")
        return resp.report_id

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def next_message(self, timeout: float = 2.0):
        return self._responses.get(timeout=timeout)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=2.0)


class LocalAcsiClient(_ClientBase):
    """In-process client with no socket; reports are delivered synchronously.

    With ``encode=True`` every message goes through the byte codec exactly as
    it would on TCP. ``encode=False`` hands the (immutable) message objects
    across directly, which is what long fast-forward runs use.
    """

    def __init__(self, server: AcsiServer, encode: bool = True):
        self.server = server
        self.encode = encode
        self._callbacks: Dict[int, ReportCallback] = {}
        self.session = Session(self._deliver)

    def _wire(self, msg: Message) -> Message:
        op, payload = unpack_envelope(pack_envelope(msg))
        return decode_message(op, payload)

    def _deliver(self, msg: Message) -> None:
        push = self._wire(msg) if self.encode else msg
        cb = self._callbacks.get(push.report_id)
        if cb is not None:
            cb(push)

    def _exchange(self, msg: Message):
        if not self.encode:
            return self.server.handle(msg, self.session)
        op, payload = unpack_envelope(pack_envelope(msg))
        resp, after = self.server.handle_bytes(op, payload, self.session)
        return self._wire(resp), after

    def _roundtrip(self, msg: Message) -> Message:
        return self._exchange(msg)[0]

    def subscribe_report(self, rcb: ReportControl, callback: ReportCallback) -> int:
        resp, after = self._exchange(SubscribeReport(rcb))
        _raise_for(resp.status, f"subscribe {rcb.dataset}")
        self._callbacks[resp.report_id] = callback
        if after:
            after()
        return resp.report_id

    def close(self) -> None:
        self.session.close()


def client_read(conn: _ClientBase, ref: str) -> Tuple[DataValue, int]:
    return conn.read(ref)


def client_write(conn: _ClientBase, ref: str, value: DataValue) -> None:
    conn.write(ref, value)


def client_browse(conn: _ClientBase, prefix: str = "") -> List[str]:
    return conn.browse(prefix)


def subscribe_report(conn, rcb: ReportControl, callback: ReportCallback) -> int:
    return conn.subscribe_report(rcb, callback)
