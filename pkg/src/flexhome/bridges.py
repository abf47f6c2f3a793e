"""Protocol bridges between the context broker and the rest of the platform.

* :class:`IoTAgent` translates device JSON messages into entity updates and
  turns broker changes of commandable attributes into device commands.
* :class:`Iec61850Agent` mirrors the server model into the broker through the
  client/server interface and writes broker command attributes back.

Model path ``LD/LN.DO.DA`` maps to entity ``urn:dev:{LD}-{LN}`` with attribute
``{DO}_{DA}``. Attributes ending in ``_setMag`` or ``_ctlVal`` are commands;
they flow broker → model only, every other attribute flows model → broker
only, so a mirrored value can never be echoed back as a write.
"""
from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .acsi import AcsiError, ReportControl, ReportMode, ReportPush
from .iec_model import ObjectReference
from .values import DataValue, VType

log = logging.getLogger(__name__)

URN_PREFIX = "urn:dev:"
COMMAND_SUFFIXES = ("_setMag", "_ctlVal")

_LN_TYPES = {
    "ZBAT": "Battery", "ZBTC": "BatteryCharger", "MMDC": "DcMeasurement",
    "MMET": "Meteo", "ZINV": "Inverter", "MMXU": "Measurement", "LLN0": "DeviceInfo",
}


class BridgeError(Exception):
    pass


class MappingError(BridgeError, ValueError):
    pass


class InvalidMessage(BridgeError, ValueError):
    pass


class UnknownDevice(BridgeError, LookupError):
    pass


class NotCommandable(BridgeError, PermissionError):
    pass


class DeviceUnreachable(BridgeError, ConnectionError):
    pass


# -- mapping -----------------------------------------------------------------------

def path_to_entity(ref) -> Tuple[str, str]:
    r = ObjectReference.parse(str(ref))
    return f"{URN_PREFIX}{r.ld}-{r.ln}", f"{r.do}_{r.da}"


def entity_to_path(entity_id: str, attr: str) -> str:
    if not entity_id.startswith(URN_PREFIX):
        raise MappingError(f"{entity_id!r} is not a device URN")
    ld, sep, ln = entity_id[len(URN_PREFIX):].partition("-")
    do, sep2, da = attr.partition("_")
    if not (sep and sep2 and ld and ln and do and da):
        raise MappingError(f"{entity_id!r}/{attr!r} does not map to a model path")
    ref = f"{ld}/{ln}.{do}.{da}"
    ObjectReference.parse(ref)
    return ref


def device_entity_id(device_id: str) -> str:
    return URN_PREFIX + device_id


def is_command_attr(attr: str) -> bool:
    return attr.endswith(COMMAND_SUFFIXES)


def entity_type_for(ln_name: str) -> str:
    return _LN_TYPES.get(ln_name.rstrip("0123456789"), "LogicalNode")


def json_type(v: DataValue) -> str:
    if v.vtype is VType.BOOL:
        return "Boolean"
    if v.vtype is VType.TEXT:
        return "Text"
    return "Number"


# -- notification endpoint ----------------------------------------------------------

class NotificationEndpoint:
    """HTTP listener that hands POSTed JSON bodies to per-path handlers."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.handlers: Dict[str, Callable[[Any], Any]] = {}
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                log.debug("endpoint: " + fmt, *args)

            def do_POST(self):
                fn = endpoint.handlers.get(self.path)
                n = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(n)
                if fn is None:
                    code, reply = 404, {"error": "NotFound"}
                else:
                    try:
                        reply = fn(json.loads(raw or b"null"))
                        code = 200
                    except (ValueError, BridgeError) as exc:
                        code, reply = 400, {"error": type(exc).__name__, "description": str(exc)}
                data = json.dumps(reply if reply is not None else {}).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self.base_url = f"http://{host}:{self.httpd.server_address[1]}"
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True, name="bridge-endpoint")
        self._thread.start()

    def route(self, path: str, handler: Callable[[Any], Any]) -> str:
        self.handlers[path] = handler
        return self.base_url + path

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


def _attach_notifications(broker, endpoint: Optional[NotificationEndpoint], name: str,
                          handler: Callable[[Dict[str, Any]], None]) -> str:
    if endpoint is not None:
        return endpoint.route(f"/notify/{name}", handler)
    if hasattr(broker, "register_local"):
        url = f"http://local.invalid/notify/{name}"
        broker.register_local(url, handler)
        return url
    raise BridgeError("an HTTP broker needs a NotificationEndpoint for callbacks")


# -- IoT agent -------------------------------------------------------------------------

class MessageKind(str, Enum):
    MEASUREMENT = "Measurement"
    COMMAND_ACK = "CommandAck"


@dataclass(frozen=True)
class DeviceMessage:
    device_id: str
    kind: MessageKind
    readings: Mapping[str, Any]
    timestamp_us: int = 0

    def __post_init__(self):
        if not isinstance(self.device_id, str) or not self.device_id:
            raise InvalidMessage("deviceId must be a non-empty string")
        if self.kind is MessageKind.MEASUREMENT and not self.readings:
            raise InvalidMessage("measurement without readings")
        for k, v in self.readings.items():
            if not isinstance(k, str) or not k or not isinstance(v, (bool, int, float)):
                raise InvalidMessage(f"reading {k!r} must be a number or bool")

    @classmethod
    def from_json(cls, body: Any) -> "DeviceMessage":
        if not isinstance(body, dict):
            raise InvalidMessage("device message must be a JSON object")
        try:
            kind = MessageKind(body.get("kind"))
        except ValueError:
            raise InvalidMessage(f"unknown kind {body.get('kind')!r}") from None
        readings = body.get("readings")
        if not isinstance(readings, dict):
            raise InvalidMessage("readings must be an object")
        ts = body.get("timestampUs", 0)
        if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
            raise InvalidMessage("timestampUs must be a non-negative integer")
        return cls(body.get("deviceId"), kind, dict(readings), ts)

    def to_json(self) -> Dict[str, Any]:
        return {"deviceId": self.device_id, "kind": self.kind.value,
                "readings": dict(self.readings), "timestampUs": self.timestamp_us}


@dataclass
class DeviceConfig:
    device_id: str
    endpoint: str
    entity_type: str = "Device"
    commandable: Sequence[str] = ()
    units: Mapping[str, str] = field(default_factory=dict)

    @staticmethod
    def status_attr(attr: str) -> str:
        return f"{attr}_status"


def http_post_json(url: str, body: Any, timeout: float = 2.0) -> Any:
    req = urllib.request.Request(url, data=json.dumps(body).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        raw = resp.read()
    return json.loads(raw) if raw else None


class IoTAgent:
    """Device JSON ↔ broker entities.

    ``post`` sends a command to a device endpoint and returns its JSON reply;
    endpoints registered with :meth:`register_local` are called in-process.
    """

    def __init__(self, broker, devices: Iterable[DeviceConfig], post: Callable[[str, Any], Any] = http_post_json,
                 retries: int = 3, backoff_s: float = 0.05, clock_us: Callable[[], int] = lambda: time.time_ns() // 1000):
        self.broker = broker
        self.devices: Dict[str, DeviceConfig] = {}
        for d in devices:
            if d.device_id in self.devices:
                raise BridgeError(f"duplicate device {d.device_id!r}")
            self.devices[d.device_id] = d
        self.post = post
        self.retries = retries
        self.backoff_s = backoff_s
        self.clock_us = clock_us
        self.local: Dict[str, Callable[[Any], Any]] = {}
        self.dropped = 0

    def register_local(self, endpoint: str, handler: Callable[[Any], Any]) -> None:
        self.local[endpoint] = handler

    def provision(self, endpoint: Optional[NotificationEndpoint] = None) -> None:
        """Create device entities and subscribe to their commandable attributes."""
        url = _attach_notifications(self.broker, endpoint, "iot", self.on_notification)
        for d in self.devices.values():
            self.broker.upsert({"id": device_entity_id(d.device_id), "type": d.entity_type})
            if d.commandable:
                self.broker.subscribe(device_entity_id(d.device_id), url, list(d.commandable))

    def ingest(self, msg: DeviceMessage) -> bool:
        """Apply a device message to the broker; unknown devices are dropped."""
        dev = self.devices.get(msg.device_id)
        if dev is None:
            self.dropped += 1
            log.warning("dropping message from unknown device %r", msg.device_id)
            return False
        attrs = {}
        for name, value in msg.readings.items():
            # device-side state of a commandable attribute lands in its status twin
            target = dev.status_attr(name) if name in dev.commandable else name
            spec: Dict[str, Any] = {"value": value, "type": "Boolean" if isinstance(value, bool) else "Number"}
            if name in dev.units:
                spec["metadata"] = {"unit": dev.units[name]}
            attrs[target] = spec
        if attrs:
            self.broker.upsert({"id": device_entity_id(dev.device_id), "type": dev.entity_type, **attrs})
        return True

    def ingest_json(self, body: Any) -> Dict[str, Any]:
        return {"accepted": self.ingest(DeviceMessage.from_json(body))}

    def command(self, entity_id: str, attr: str, value: Any) -> DeviceMessage:
        if not entity_id.startswith(URN_PREFIX) or entity_id[len(URN_PREFIX):] not in self.devices:
            raise UnknownDevice(entity_id)
        dev = self.devices[entity_id[len(URN_PREFIX):]]
        if attr not in dev.commandable:
            raise NotCommandable(f"{attr!r} of {dev.device_id!r} is not commandable")
        body = {"set": {attr: value}}
        handler = self.local.get(dev.endpoint)
        last: Optional[Exception] = None
        for attempt in range(1 + self.retries):
            try:
                reply = handler(body) if handler is not None else self.post(dev.endpoint, body)
                break
            except (OSError, urllib.error.URLError, ConnectionError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (attempt + 1))
        else:
            raise DeviceUnreachable(f"{dev.device_id}: {last}")
        ack = DeviceMessage.from_json(reply)
        if ack.kind is not MessageKind.COMMAND_ACK or ack.device_id != dev.device_id:
            raise InvalidMessage(f"expected a CommandAck from {dev.device_id!r}")
        self.ingest(ack)
        return ack

    def on_notification(self, body: Dict[str, Any]) -> None:
        for ent in body.get("data", []):
            for name, spec in ent.items():
                if name in ("id", "type"):
                    continue
                try:
                    self.command(ent["id"], name, spec["value"])
                except BridgeError as exc:
                    log.error("command %s.%s failed: %s", ent.get("id"), name, exc)


def iot_ingest(agent: IoTAgent, msg: DeviceMessage) -> bool:
    return agent.ingest(msg)


def iot_command(agent: IoTAgent, entity_id: str, attr: str, value: Any) -> DeviceMessage:
    return agent.command(entity_id, attr, value)


class SimulatedPlug:
    """A smart plug with an ``on`` relay and a fixed rated draw."""

    def __init__(self, device_id: str, rated_w: float = 700.0, clock_us: Callable[[], int] = lambda: time.time_ns() // 1000):
        self.device_id = device_id
        self.rated_w = rated_w
        self.on = False
        self.clock_us = clock_us
        self.received: List[Dict[str, Any]] = []

    @property
    def power_w(self) -> float:
        return self.rated_w if self.on else 0.0

    def handle(self, body: Any) -> Dict[str, Any]:
        self.received.append(body)
        cmd = body.get("set") if isinstance(body, dict) else None
        if not isinstance(cmd, dict):
            raise InvalidMessage("expected {'set': {...}}")
        if "on" in cmd:
            if not isinstance(cmd["on"], bool):
                raise InvalidMessage("'on' must be a bool")
            self.on = cmd["on"]
        return DeviceMessage(self.device_id, MessageKind.COMMAND_ACK, {"on": self.on}, self.clock_us()).to_json()

    def measurement(self) -> DeviceMessage:
        return DeviceMessage(self.device_id, MessageKind.MEASUREMENT,
                             {"power_w": self.power_w, "on": self.on}, self.clock_us())


# -- IEC 61850 agent -----------------------------------------------------------------------

class Iec61850Agent:
    """Keeps broker entities and the server model in step through an ACSI client.

    ``mirror`` maps a server-side dataset name to its member references; the
    agent subscribes to OnChange reports on each and upserts the mapped
    entities. Command attributes found by browsing are watched in the broker
    and written to the model when they change. ``period_ms`` > 0 switches the
    mirror to periodic reports; only values that differ from the last upload
    are sent either way.
    """

    def __init__(self, broker, acsi, mirror: Mapping[str, Sequence[str]], period_ms: int = 0):
        self.broker = broker
        self.acsi = acsi
        self.mirror = {name: [str(r) for r in refs] for name, refs in mirror.items()}
        self.period_ms = period_ms
        self._uploaded: Dict[str, DataValue] = {}
        self._targets = {ref: path_to_entity(ref) for refs in self.mirror.values() for ref in refs}
        self.vtypes: Dict[str, VType] = {}
        self.command_paths: List[str] = []
        self.report_ids: List[int] = []
        self.errors = 0
        self.writes = 0
        self._lock = threading.Lock()

    def start(self, endpoint: Optional[NotificationEndpoint] = None) -> None:
        refs = self.acsi.browse("")
        entities: Dict[str, Dict[str, Any]] = {}
        for ref in refs:
            value, _ = self.acsi.read(ref)
            self.vtypes[ref] = value.vtype
            eid, attr = path_to_entity(ref)
            ent = entities.setdefault(eid, {"id": eid, "type": entity_type_for(ObjectReference.parse(ref).ln)})
            if is_command_attr(attr):
                self.command_paths.append(ref)
            else:
                ent[attr] = {"value": value.value, "type": json_type(value)}
                self._uploaded[ref] = value
        for ent in entities.values():
            self.broker.upsert(ent)
        url = _attach_notifications(self.broker, endpoint, "iec61850", self.on_notification)
        watched: Dict[str, List[str]] = {}
        for ref in self.command_paths:
            eid, attr = path_to_entity(ref)
            watched.setdefault(eid, []).append(attr)
        for eid, attrs in watched.items():
            self.broker.subscribe(eid, url, attrs)
        mode = ReportMode.PERIODIC if self.period_ms > 0 else ReportMode.ON_CHANGE
        for name in self.mirror:
            self.report_ids.append(self.acsi.subscribe_report(
                ReportControl(name, mode, self.period_ms), self.on_report))

    def on_report(self, push: ReportPush) -> None:
        refs = self.mirror.get(push.dataset)
        if refs is None or len(refs) != len(push.entries):
            log.error("report for %r does not match the configured members", push.dataset)
            return
        updates: Dict[str, Dict[str, Any]] = {}
        with self._lock:
            for ref, (value, _) in zip(refs, push.entries):
                if self._uploaded.get(ref) == value:
                    continue
                eid, attr = self._targets[ref]
                if is_command_attr(attr):
                    continue
                self._uploaded[ref] = value
                updates.setdefault(eid, {})[attr] = {"value": value.value, "type": json_type(value)}
            for eid, attrs in updates.items():
                self.broker.patch_attrs(eid, attrs)

    def on_notification(self, body: Dict[str, Any]) -> None:
        for ent in body.get("data", []):
            eid = ent.get("id", "")
            for attr, spec in ent.items():
                if attr in ("id", "type") or not is_command_attr(attr):
                    continue
                self._write(eid, attr, spec.get("value") if isinstance(spec, dict) else spec)

    def _write(self, eid: str, attr: str, plain: Any) -> None:
        try:
            ref = entity_to_path(eid, attr)
            vtype = self.vtypes.get(ref)
            if vtype is None:
                raise MappingError(f"{ref} is not a known model path")
            self.acsi.write(ref, DataValue.coerce(vtype, plain))
            self.writes += 1
        except (AcsiError, BridgeError, TypeError, ValueError, LookupError, PermissionError) as exc:
            self.errors += 1
            log.error("write-through %s.%s failed: %s", eid, attr, exc)
            note = {"error": {"value": f"{type(exc).__name__}: {attr}: {exc}", "type": "Text"}}
            try:
                self.broker.patch_attrs(eid, note)
            except Exception as nested:  # the annotation itself is best-effort
                log.error("could not annotate %s: %s", eid, nested)


def i61850_sync(agent: Iec61850Agent, endpoint: Optional[NotificationEndpoint] = None) -> None:
    agent.start(endpoint)
