"""A small NGSI-v2-flavoured context broker.

Entities are typed records of timestamped attributes. Subscriptions match an
entity id (exact, or a prefix ending in ``*``) and an optional attribute list;
every update that changes a matching attribute produces exactly one
notification, delivered off the request path in order per subscription.

HTTP surface::

    POST  /v2/entities                 create or merge an entity
    GET   /v2/entities/{id}            fetch one entity
    PATCH /v2/entities/{id}/attrs      update attributes of an existing entity
    GET   /v2/entities?type=T          list entities, optionally by type
    POST  /v2/subscriptions            register a subscription
"""
from __future__ import annotations

import copy
import itertools
import json
import logging
import os
import queue
import tempfile
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
from urllib.parse import parse_qs, unquote, urlparse

log = logging.getLogger(__name__)

DEFAULT_PORT = 10280


class BrokerError(Exception):
    pass


class NotFound(BrokerError, LookupError):
    pass


class InvalidRequest(BrokerError, ValueError):
    pass


@dataclass
class Attribute:
    value: Any
    type: str
    timestamp_us: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def wire(self) -> Dict[str, Any]:
        md = dict(self.metadata)
        md["timestampUs"] = self.timestamp_us
        return {"value": self.value, "type": self.type, "metadata": md}


@dataclass
class Entity:
    id: str
    type: str
    attrs: Dict[str, Attribute] = field(default_factory=dict)

    def wire(self, names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        out: Dict[str, Any] = {"id": self.id, "type": self.type}
        for name, a in self.attrs.items():
            if names is None or name in names:
                out[name] = a.wire()
        return out

    @classmethod
    def from_wire(cls, body: Dict[str, Any]) -> "Entity":
        if not isinstance(body, dict) or not isinstance(body.get("id"), str) or not body["id"]:
            raise InvalidRequest("entity needs a non-empty string id")
        etype = body.get("type", "Thing")
        if not isinstance(etype, str):
            raise InvalidRequest("entity type must be a string")
        attrs = parse_attrs({k: v for k, v in body.items() if k not in ("id", "type")})
        return cls(body["id"], etype, attrs)

    def content(self) -> Dict[str, Any]:
        """Entity without timestamps, for equality checks."""
        return {"id": self.id, "type": self.type,
                "attrs": {k: (a.value, a.type, a.metadata) for k, a in self.attrs.items()}}


def infer_type(value: Any) -> str:
    if isinstance(value, bool):
        return "Boolean"
    if isinstance(value, (int, float)):
        return "Number"
    if isinstance(value, str):
        return "Text"
    return "StructuredValue"


def parse_attrs(raw: Dict[str, Any]) -> Dict[str, Attribute]:
    out = {}
    for name, spec in raw.items():
        if not name or name in ("id", "type"):
            raise InvalidRequest(f"invalid attribute name {name!r}")
        if isinstance(spec, dict) and "value" in spec:
            md = spec.get("metadata") or {}
            if not isinstance(md, dict):
                raise InvalidRequest(f"metadata of {name!r} must be an object")
            if md:
                md = {k: v for k, v in md.items() if k != "timestampUs"}
            out[name] = Attribute(spec["value"], spec.get("type") or infer_type(spec["value"]), 0, md)
        else:
            out[name] = Attribute(spec, infer_type(spec))
    return out


@dataclass
class Subscription:
    id: str
    entity_id_pattern: str
    notify_url: str
    watched_attrs: List[str] = field(default_factory=list)

    def __post_init__(self):
        u = urlparse(self.notify_url)
        if u.scheme not in ("http", "https") or not u.netloc:
            raise InvalidRequest(f"notifyUrl must be an http(s) URL, got {self.notify_url!r}")
        if not self.entity_id_pattern:
            raise InvalidRequest("entity id pattern must be non-empty")

    def matches_id(self, entity_id: str) -> bool:
        p = self.entity_id_pattern
        if p.endswith("*"):
            return entity_id.startswith(p[:-1])
        return entity_id == p

    def wire(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "subject": {"entities": [{"idPattern": self.entity_id_pattern}],
                        "condition": {"attrs": list(self.watched_attrs)}},
            "notification": {"http": {"url": self.notify_url}},
        }

    @classmethod
    def from_wire(cls, body: Dict[str, Any], sub_id: str = "") -> "Subscription":
        try:
            ent = body["subject"]["entities"][0]
            pattern = ent.get("idPattern") or ent["id"]
            attrs = body["subject"].get("condition", {}).get("attrs", [])
            url = body["notification"]["http"]["url"]
        except (KeyError, IndexError, TypeError, AttributeError):
            raise InvalidRequest("subscription needs subject.entities[0].id|idPattern and notification.http.url") from None
        return cls(sub_id, pattern, url, list(attrs))


# -- notification delivery -------------------------------------------------------

def http_post_json(url: str, body: Dict[str, Any], timeout: float = 2.0) -> None:
    data = json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method="POST", headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        resp.read()


class Notifier:
    """Queue-backed delivery worker: one FIFO, so per-subscription order holds.

    ``post`` is the transport; ``local`` maps URLs to in-process handlers that
    bypass HTTP (used for the deterministic in-process harness). Failed
    deliveries are retried ``retries`` times and then dropped with an error log.
    """

    def __init__(self, post: Callable[[str, Dict[str, Any]], None] = http_post_json, retries: int = 3,
                 backoff_s: float = 0.05, synchronous: bool = False):
        self.post = post
        self.retries = retries
        self.backoff_s = backoff_s
        self.synchronous = synchronous
        self.local: Dict[str, Callable[[Dict[str, Any]], None]] = {}
        self.delivered = 0
        self.dropped = 0
        self._q: "queue.Queue[Optional[tuple]]" = queue.Queue()
        self._thread: Optional[threading.Thread] = None
        self._idle = threading.Condition()
        self._inflight = 0

    def register_local(self, url: str, handler: Callable[[Dict[str, Any]], None]) -> None:
        self.local[url] = handler

    def submit(self, url: str, body: Dict[str, Any]) -> None:
        if self.synchronous:
            self._deliver(url, body)
            return
        with self._idle:
            self._inflight += 1
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, daemon=True, name="broker-notifier")
            self._thread.start()
        self._q.put((url, body))

    def _deliver(self, url: str, body: Dict[str, Any]) -> None:
        handler = self.local.get(url)
        attempts = 1 + self.retries
        for attempt in range(attempts):
            try:
                if handler is not None:
                    handler(body)
                else:
                    self.post(url, body)
                self.delivered += 1
                return
            except Exception as exc:  # delivery failure of any kind is retried
                last = exc
                if attempt + 1 < attempts and not self.synchronous:
                    time.sleep(self.backoff_s * (attempt + 1))
        self.dropped += 1
        log.error("notification to %s dropped after %d retries: %s", url, self.retries, last)

    def _run(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                return
            self._deliver(*item)
            with self._idle:
                self._inflight -= 1
                self._idle.notify_all()

    def drain(self, timeout: float = 5.0) -> bool:
        """Wait until every submitted notification was delivered or dropped."""
        with self._idle:
            return self._idle.wait_for(lambda: self._inflight == 0, timeout)

    def close(self) -> None:
        if self._thread is not None:
            self._q.put(None)
            self._thread.join(timeout=2.0)
            self._thread = None


# -- store ------------------------------------------------------------------------

def _wall_us() -> int:
    return time.time_ns() // 1000


class EntityStore:
    def __init__(self, clock_us: Callable[[], int] = _wall_us, notifier: Optional[Notifier] = None,
                 persist_path: Optional[str] = None, flush_interval_s: float = 1.0):
        self.clock_us = clock_us
        self.notifier = notifier or Notifier()
        self.persist_path = Path(persist_path) if persist_path else None
        self._entities: Dict[str, Entity] = {}
        self._subs: Dict[str, Subscription] = {}
        self._sub_ids = itertools.count(1)
        self._lock = threading.RLock()
        self._dirty = False
        self._flusher: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.flush_interval_s = flush_interval_s
        if self.persist_path and self.persist_path.exists():
            self._load()
        if self.persist_path:
            self._flusher = threading.Thread(target=self._flush_loop, daemon=True, name="broker-flush")
            self._flusher.start()

    # persistence

    def _load(self) -> None:
        raw = json.loads(self.persist_path.read_text())
        for body in raw.get("entities", []):
            ent = Entity(body["id"], body["type"])
            for name, a in body["attrs"].items():
                ent.attrs[name] = Attribute(a["value"], a["type"], a["timestampUs"], a.get("metadata", {}))
            self._entities[ent.id] = ent
        for body in raw.get("subscriptions", []):
            sub = Subscription(body["id"], body["idPattern"], body["notifyUrl"], body["attrs"])
            self._subs[sub.id] = sub
        self._sub_ids = itertools.count(raw.get("nextSubscription", len(self._subs) + 1))

    def flush(self) -> None:
        if not self.persist_path:
            return
        with self._lock:
            doc = {
                "entities": [
                    {"id": e.id, "type": e.type,
                     "attrs": {n: {"value": a.value, "type": a.type, "timestampUs": a.timestamp_us,
                                   "metadata": a.metadata} for n, a in e.attrs.items()}}
                    for e in self._entities.values()
                ],
                "subscriptions": [
                    {"id": s.id, "idPattern": s.entity_id_pattern, "notifyUrl": s.notify_url,
                     "attrs": s.watched_attrs} for s in self._subs.values()
                ],
                "nextSubscription": self._peek_sub_id(),
            }
            self._dirty = False
        self.persist_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.persist_path.parent, prefix=".broker-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.persist_path)

    def _peek_sub_id(self) -> int:
        nxt = next(self._sub_ids)
        self._sub_ids = itertools.count(nxt)
        return nxt

    def _flush_loop(self) -> None:
        while not self._stop.wait(self.flush_interval_s):
            if self._dirty:
                self.flush()

    def close(self) -> None:
        self._stop.set()
        if self._flusher is not None:
            self._flusher.join(timeout=2.0)
        if self.persist_path and self._dirty:
            self.flush()
        self.notifier.close()

    # mutation

    def _apply(self, ent: Entity, attrs: Dict[str, Attribute]) -> List[str]:
        now = self.clock_us()
        changed = []
        for name, new in attrs.items():
            old = ent.attrs.get(name)
            if old is not None and old.value == new.value and type(old.value) is type(new.value) \
                    and old.type == new.type and old.metadata == new.metadata:
                continue
            ts = max(now, old.timestamp_us) if old is not None else now
            ent.attrs[name] = Attribute(new.value, new.type, ts, dict(new.metadata) if new.metadata else {})
            changed.append(name)
        return changed

    def upsert_entity(self, entity: Entity) -> List[str]:
        """Create ``entity`` or merge its attributes; returns the changed attribute names."""
        with self._lock:
            cur = self._entities.get(entity.id)
            if cur is None:
                cur = Entity(entity.id, entity.type)
                self._entities[entity.id] = cur
            cur.type = entity.type
            changed = self._apply(cur, entity.attrs)
            self._after_change(cur, changed)
            return changed

    def update_attrs(self, entity_id: str, attrs: Dict[str, Any]) -> List[str]:
        """Update attributes of an existing entity.

        ``attrs`` maps names to plain values, to ``{"value", "type"}`` dicts, or
        to :class:`Attribute` instances.
        """
        raw = {k: v for k, v in attrs.items() if not isinstance(v, Attribute)}
        parsed = parse_attrs(raw) if len(raw) == len(attrs) else dict(attrs, **parse_attrs(raw))
        with self._lock:
            cur = self._entities.get(entity_id)
            if cur is None:
                raise NotFound(f"no entity {entity_id!r}")
            changed = self._apply(cur, parsed)
            self._after_change(cur, changed)
            return changed

    def _after_change(self, ent: Entity, changed: List[str]) -> None:
        if not changed:
            return
        self._dirty = True
        for sub in self._subs.values():
            if not sub.matches_id(ent.id):
                continue
            names = [n for n in changed if not sub.watched_attrs or n in sub.watched_attrs]
            if names:
                body = {"subscriptionId": sub.id, "data": [copy.deepcopy(ent.wire(names))]}
                self.notifier.submit(sub.notify_url, body)

    # queries

    def get_entity(self, entity_id: str) -> Entity:
        with self._lock:
            ent = self._entities.get(entity_id)
            if ent is None:
                raise NotFound(f"no entity {entity_id!r}")
            return copy.deepcopy(ent)

    def query(self, etype: Optional[str] = None) -> List[Entity]:
        with self._lock:
            return [copy.deepcopy(e) for e in self._entities.values() if etype is None or e.type == etype]

    def create_subscription(self, sub: Subscription) -> str:
        with self._lock:
            sub.id = sub.id or f"sub-{next(self._sub_ids)}"
            if sub.id in self._subs:
                raise InvalidRequest(f"duplicate subscription id {sub.id!r}")
            self._subs[sub.id] = sub
            self._dirty = True
            return sub.id

    def subscriptions(self) -> List[Subscription]:
        with self._lock:
            return list(self._subs.values())


def upsert_entity(store: EntityStore, entity: Entity) -> List[str]:
    return store.upsert_entity(entity)


def update_attrs(store: EntityStore, entity_id: str, attrs: Dict[str, Any]) -> List[str]:
    return store.update_attrs(entity_id, attrs)


def get_entity(store: EntityStore, entity_id: str) -> Entity:
    return store.get_entity(entity_id)


def query(store: EntityStore, etype: Optional[str] = None) -> List[Entity]:
    return store.query(etype)


def create_subscription(store: EntityStore, sub: Subscription) -> str:
    return store.create_subscription(sub)


# -- HTTP ---------------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    store: EntityStore
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("broker http: " + fmt, *args)

    def _send(self, code: int, body: Any = None, headers: Optional[Dict[str, str]] = None) -> None:
        data = b"" if body is None else json.dumps(body).encode()
        self.send_response(code)
        if body is not None:
            self.send_header("Content-Type", "application/json")
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> Any:
        n = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(n) if n else b""
        try:
            return json.loads(raw or b"null")
        except json.JSONDecodeError:
            raise InvalidRequest("body is not JSON") from None

    def _route(self, method: str) -> None:
        url = urlparse(self.path)
        parts = [unquote(p) for p in url.path.split("/") if p]
        try:
            if len(parts) < 2 or parts[0] != "v2":
                raise NotFound(url.path)
            if method == "POST" and parts == ["v2", "entities"]:
                ent = Entity.from_wire(self._body())
                self.store.upsert_entity(ent)
                return self._send(201, headers={"Location": f"/v2/entities/{ent.id}"})
            if method == "GET" and parts == ["v2", "entities"]:
                etype = parse_qs(url.query).get("type", [None])[0]
                return self._send(200, [e.wire() for e in self.store.query(etype)])
            if method == "GET" and len(parts) == 3 and parts[1] == "entities":
                return self._send(200, self.store.get_entity(parts[2]).wire())
            if method == "PATCH" and len(parts) == 4 and parts[1] == "entities" and parts[3] == "attrs":
                body = self._body()
                if not isinstance(body, dict) or not body:
                    raise InvalidRequest("attrs body must be a non-empty object")
                self.store.update_attrs(parts[2], body)
                return self._send(204)
            if method == "POST" and parts == ["v2", "subscriptions"]:
                sid = self.store.create_subscription(Subscription.from_wire(self._body()))
                return self._send(201, headers={"Location": f"/v2/subscriptions/{sid}"})
            if method == "GET" and parts == ["v2", "subscriptions"]:
                return self._send(200, [s.wire() for s in self.store.subscriptions()])
            raise NotFound(url.path)
        except NotFound as exc:
            self._send(404, {"error": "NotFound", "description": str(exc)})
        except InvalidRequest as exc:
            self._send(400, {"error": "BadRequest", "description": str(exc)})

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")

    def do_PATCH(self):
        self._route("PATCH")


class BrokerServer:
    def __init__(self, store: EntityStore, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        handler = type("BrokerHandler", (_Handler,), {"store": store})
        self.store = store
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self.url = f"http://{host}:{self.port}"
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True, name="broker-http")

    def start(self) -> "BrokerServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


class BrokerClient:
    """Thin HTTP client for the broker API."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, body: Any = None):
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.base + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
                return resp.status, (json.loads(raw) if raw else None), dict(resp.headers)
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            return exc.code, (json.loads(raw) if raw else None), dict(exc.headers)

    def upsert(self, entity: Dict[str, Any]) -> int:
        return self._call("POST", "/v2/entities", entity)[0]

    def get(self, entity_id: str):
        code, body, _ = self._call("GET", f"/v2/entities/{urllib.request.quote(entity_id, safe='')}")
        if code == 404:
            raise NotFound(entity_id)
        return body

    def patch_attrs(self, entity_id: str, attrs: Dict[str, Any]) -> int:
        code = self._call("PATCH", f"/v2/entities/{urllib.request.quote(entity_id, safe='')}/attrs", attrs)[0]
        if code == 404:
            raise NotFound(entity_id)
        return code

    def query(self, etype: Optional[str] = None):
        path = "/v2/entities" + (f"?type={urllib.request.quote(etype)}" if etype else "")
        return self._call("GET", path)[1]

    def subscribe(self, id_pattern: str, notify_url: str, attrs: Sequence[str] = ()) -> str:
        body = {"subject": {"entities": [{"idPattern": id_pattern}], "condition": {"attrs": list(attrs)}},
                "notification": {"http": {"url": notify_url}}}
        code, _, headers = self._call("POST", "/v2/subscriptions", body)
        if code != 201:
            raise InvalidRequest(f"subscription rejected ({code})")
        return headers["Location"].rsplit("/", 1)[-1]


class LocalBrokerClient:
    """Same surface as :class:`BrokerClient`, bound directly to a store.

    Notification URLs registered through :meth:`register_local` are delivered
    by calling the handler instead of issuing HTTP requests.
    """

    def __init__(self, store: EntityStore):
        self.store = store

    def upsert(self, entity: Dict[str, Any]) -> int:
        self.store.upsert_entity(Entity.from_wire(entity))
        return 201

    def get(self, entity_id: str) -> Dict[str, Any]:
        return self.store.get_entity(entity_id).wire()

    def patch_attrs(self, entity_id: str, attrs: Dict[str, Any]) -> int:
        self.store.update_attrs(entity_id, attrs)
        return 204

    def query(self, etype: Optional[str] = None) -> List[Dict[str, Any]]:
        return [e.wire() for e in self.store.query(etype)]

    def subscribe(self, id_pattern: str, notify_url: str, attrs: Sequence[str] = ()) -> str:
        return self.store.create_subscription(Subscription("", id_pattern, notify_url, list(attrs)))

    def register_local(self, url: str, handler: Callable[[Dict[str, Any]], None]) -> None:
        self.store.notifier.register_local(url, handler)
