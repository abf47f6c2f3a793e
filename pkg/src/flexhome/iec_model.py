"""Hierarchical IEC 61850-style server model for one household installation.

Logical devices hold logical nodes, which hold data objects of typed data
attributes. Every attribute carries a functional constraint (MX, ST, CO, SP,
CF) that decides which write channel may modify it. All reads and writes go
through one re-entrant lock so the model can be shared by network services,
bridges and the simulation loop.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .values import DataValue, VType


class ModelError(Exception):
    pass


class ModelBuildError(ModelError):
    pass


class NotFound(ModelError, LookupError):
    pass


class TypeMismatch(ModelError, TypeError):
    pass


class AccessDenied(ModelError, PermissionError):
    pass


class FC(Enum):
    MX = "MX"
    ST = "ST"
    CO = "CO"
    SP = "SP"
    CF = "CF"


class Channel(Enum):
    PLANT = "plant"
    CONTROLLER = "controller"
    CONFIG = "config"


PERMITTED = {
    Channel.PLANT: frozenset({FC.MX, FC.ST}),
    Channel.CONTROLLER: frozenset({FC.CO, FC.SP}),
    Channel.CONFIG: frozenset(FC),
}

LN_CLASSES = frozenset({"MMXU", "ZBAT", "ZBTC", "MMDC", "MMET", "ZINV", "LLN0"})


@dataclass(frozen=True)
class ObjectReference:
    ld: str
    ln: str
    do: str
    da: str

    @classmethod
    def parse(cls, text: str) -> "ObjectReference":
        if not isinstance(text, str) or text.count("/") != 1:
            raise NotFound(f"unparsable object reference {text!r}")
        ld, rest = text.split("/")
        parts = rest.split(".")
        if len(parts) != 3 or not ld or not all(parts):
            raise NotFound(f"unparsable object reference {text!r}")
        return cls(ld, *parts)

    def __str__(self) -> str:
        text = self.__dict__.get("_text")
        if text is None:
            text = f"{self.ld}/{self.ln}.{self.do}.{self.da}"
            object.__setattr__(self, "_text", text)
        return text


@dataclass
class DataAttribute:
    name: str
    vtype: VType
    fc: FC
    unit: Optional[str] = None
    value: Optional[DataValue] = None
    timestamp_us: int = 0


@dataclass
class DataObject:
    name: str
    attributes: Dict[str, DataAttribute] = field(default_factory=dict)


@dataclass
class LogicalNode:
    name: str
    ln_class: str
    description: str = ""
    data_objects: Dict[str, DataObject] = field(default_factory=dict)


@dataclass
class LogicalDevice:
    name: str
    logical_nodes: Dict[str, LogicalNode] = field(default_factory=dict)


@dataclass(frozen=True)
class AttributeHandle:
    ref: ObjectReference
    vtype: VType
    fc: FC
    unit: Optional[str]


@dataclass(frozen=True)
class DataSet:
    name: str
    members: Tuple[ObjectReference, ...]


Change = Tuple[ObjectReference, DataValue, int]
Listener = Callable[[List[Change]], None]


def _wall_clock_us() -> int:
    return time.time_ns() // 1000


def _default_value(vtype: VType) -> DataValue:
    return {
        VType.BOOL: DataValue.bool(False),
        VType.INT32: DataValue.int32(0),
        VType.FLOAT32: DataValue.float32(0.0),
        VType.FLOAT64: DataValue.float64(0.0),
        VType.TEXT: DataValue.text(""),
        VType.TIMESTAMP_US: DataValue.timestamp(0),
    }[vtype]


def _check_name(kind: str, name: str) -> None:
    if not name or any(c in name for c in "/.") or "-" in name:
        raise ModelBuildError(f"invalid {kind} name {name!r}")


class ServerModel:
    """The per-prosumer data model. Timestamps are assigned here, at write time."""

    def __init__(self, name: str, clock_us: Callable[[], int] = _wall_clock_us):
        self.name = name
        self.logical_devices: Dict[str, LogicalDevice] = {}
        self.datasets: Dict[str, DataSet] = {}
        self.clock_us = clock_us
        self._index: Dict[str, DataAttribute] = {}
        self._pairs: Dict[object, Tuple[ObjectReference, DataAttribute]] = {}
        self._lock = threading.RLock()
        self._listeners: List[Listener] = []

    # -- construction -----------------------------------------------------

    def add_logical_device(self, name: str) -> LogicalDevice:
        _check_name("logical device", name)
        if name in self.logical_devices:
            raise ModelBuildError(f"duplicate logical device {name!r}")
        ld = LogicalDevice(name)
        self.logical_devices[name] = ld
        return ld

    def add_logical_node(self, ld_name: str, ln_name: str, ln_class: str, description: str = "") -> LogicalNode:
        _check_name("logical node", ln_name)
        if ln_class not in LN_CLASSES:
            raise ModelBuildError(f"unsupported logical node class {ln_class!r}")
        if not ln_name.startswith(ln_class):
            raise ModelBuildError(f"node {ln_name!r} must be an instance of {ln_class}")
        ld = self.logical_devices.get(ld_name)
        if ld is None:
            raise ModelBuildError(f"unknown logical device {ld_name!r}")
        if ln_name in ld.logical_nodes:
            raise ModelBuildError(f"duplicate logical node {ld_name}/{ln_name}")
        ln = LogicalNode(ln_name, ln_class, description)
        ld.logical_nodes[ln_name] = ln
        return ln

    def add_attribute(self, ld: str, ln: str, do: str, da: str, vtype: VType, fc: FC,
                      unit: Optional[str] = None, initial: Optional[DataValue] = None) -> ObjectReference:
        _check_name("data object", do)
        _check_name("data attribute", da)
        if "_" in do or "_" in da:
            raise ModelBuildError(f"'_' is reserved for entity attribute names: {do}.{da}")
        node = self.logical_devices[ld].logical_nodes[ln]
        dobj = node.data_objects.setdefault(do, DataObject(do))
        if da in dobj.attributes:
            raise ModelBuildError(f"duplicate attribute {ld}/{ln}.{do}.{da}")
        value = initial if initial is not None else _default_value(vtype)
        if value.vtype is not vtype:
            raise ModelBuildError(f"initial value {value!r} does not match {vtype.name}")
        attr = DataAttribute(da, vtype, fc, unit, value, 0)
        dobj.attributes[da] = attr
        ref = ObjectReference(ld, ln, do, da)
        self._index[str(ref)] = attr
        self._pairs[str(ref)] = self._pairs[ref] = (ref, attr)
        return ref

    # -- access -----------------------------------------------------------

    def _lookup(self, ref) -> Tuple[ObjectReference, DataAttribute]:
        pair = self._pairs.get(ref)
        if pair is not None:
            return pair
        if not isinstance(ref, ObjectReference):
            ref = ObjectReference.parse(ref)
        attr = self._index.get(str(ref))
        if attr is None:
            raise NotFound(f"no attribute at {ref}")
        return ref, attr

    def resolve(self, ref) -> AttributeHandle:
        r, attr = self._lookup(ref)
        return AttributeHandle(r, attr.vtype, attr.fc, attr.unit)

    def read_value(self, ref) -> Tuple[DataValue, int]:
        _, attr = self._lookup(ref)
        with self._lock:
            return attr.value, attr.timestamp_us

    def read_many(self, refs: Iterable) -> List[Tuple[DataValue, int]]:
        looked = [self._lookup(r)[1] for r in refs]
        with self._lock:
            return [(a.value, a.timestamp_us) for a in looked]

    def write_value(self, ref, value: DataValue, channel: Channel) -> None:
        self.write_values([(ref, value)], channel)

    def write_values(self, items: Sequence[Tuple[object, DataValue]], channel: Channel) -> None:
        """Validate every item, then apply all of them under one lock.

        Listeners are called once per batch with the attributes whose value
        actually changed.
        """
        checked = []
        for ref, value in items:
            r, attr = self._lookup(ref)
            if not isinstance(value, DataValue) or value.vtype is not attr.vtype:
                raise TypeMismatch(f"{r} expects {attr.vtype.name}, got {value!r}")
            if attr.fc not in PERMITTED[channel]:
                raise AccessDenied(f"{channel.value} channel may not write {attr.fc.value} attribute {r}")
            checked.append((r, attr, value))
        with self._lock:
            now = self.clock_us()
            changes: List[Change] = []
            for r, attr, value in checked:
                ts = max(now, attr.timestamp_us)
                changed = attr.value != value
                attr.value = value
                attr.timestamp_us = ts
                if changed:
                    changes.append((r, value, ts))
            if changes:
                for listener in list(self._listeners):
                    listener(changes)

    def add_listener(self, listener: Listener) -> Callable[[], None]:
        with self._lock:
            self._listeners.append(listener)

        def remove() -> None:
            with self._lock:
                if listener in self._listeners:
                    self._listeners.remove(listener)
        return remove

    @property
    def lock(self) -> threading.RLock:
        return self._lock

    def references(self) -> List[ObjectReference]:
        return [ObjectReference.parse(k) for k in self._index]

    def browse(self, prefix: str = "") -> List[str]:
        """All attribute paths equal to ``prefix`` or below it on a segment boundary."""
        if not prefix:
            return list(self._index)
        out = []
        for path in self._index:
            if path == prefix or (path.startswith(prefix) and path[len(prefix)] in "/."):
                out.append(path)
        return out

    # -- datasets ---------------------------------------------------------

    def define_dataset(self, name: str, members: Sequence) -> DataSet:
        if not name:
            raise ModelError("dataset name must be non-empty")
        if not members:
            raise ModelError(f"dataset {name!r} has no members")
        refs = tuple(self._lookup(m)[0] for m in members)
        with self._lock:
            if name in self.datasets:
                raise ModelError(f"duplicate dataset {name!r}")
            ds = DataSet(name, refs)
            self.datasets[name] = ds
        return ds

    def dataset(self, name: str) -> DataSet:
        ds = self.datasets.get(name)
        if ds is None:
            raise NotFound(f"no dataset {name!r}")
        return ds

    def snapshot(self, name: str) -> List[Tuple[DataValue, int]]:
        return self.read_many(self.dataset(name).members)


# -- the household layout ---------------------------------------------------

F32, BOOL = VType.FLOAT32, VType.BOOL

PV_MMDC = "PV1/MMDC1.Watt.mag"
PV_IRR = "PV1/MMET1.Irr.mag"
PV_TMP = "PV1/MMET1.PnlTmp.mag"
PV_W = "PV1/MMXU1.TotW.mag"
INV_SET = "PV1/ZINV1.OutWSet.setMag"
INV_MAXW = "PV1/ZINV1.MaxW.setMag"
INV_ST = "PV1/ZINV1.InvSt.stVal"
BAT_W = "BAT1/ZBAT1.Watt.mag"
BAT_SOC = "BAT1/ZBAT1.SocPct.mag"
BAT_MAXCHA = "BAT1/ZBAT1.MaxWCha.setMag"
BAT_MAXDIS = "BAT1/ZBAT1.MaxWDis.setMag"
BAT_ST = "BAT1/ZBAT1.BatSt.stVal"
BAT_SPT = "BAT1/ZBTC1.WSpt.setMag"
LOAD_W = "LOAD1/MMXU1.TotW.mag"
GRID_W = "GRID1/MMXU1.TotW.mag"


def switch_load_node(index: int) -> str:
    """Logical node name of the ``index``-th switchable load (MMXU1 is the total)."""
    return f"MMXU{index + 2}"


def switch_power_ref(index: int) -> str:
    return f"LOAD1/{switch_load_node(index)}.TotW.mag"


def switch_ctl_ref(index: int) -> str:
    return f"LOAD1/{switch_load_node(index)}.SwSt.ctlVal"


def build_home_model(plant_config, clock_us: Callable[[], int] = _wall_clock_us, name: str = "HEMS") -> ServerModel:
    """Build the PV / battery / load / grid model for one household."""
    names = [ld.name for ld in plant_config.switchable_loads]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ModelBuildError(f"duplicate switchable load names: {dupes}")

    m = ServerModel(name, clock_us)
    for ld in ("PV1", "BAT1", "LOAD1", "GRID1"):
        m.add_logical_device(ld)

    m.add_logical_node("PV1", "MMDC1", "MMDC")
    m.add_attribute("PV1", "MMDC1", "Watt", "mag", F32, FC.MX, "W")
    m.add_logical_node("PV1", "MMET1", "MMET")
    m.add_attribute("PV1", "MMET1", "Irr", "mag", F32, FC.MX, "W/m2")
    m.add_attribute("PV1", "MMET1", "PnlTmp", "mag", F32, FC.MX, "degC")
    m.add_logical_node("PV1", "MMXU1", "MMXU")
    m.add_attribute("PV1", "MMXU1", "TotW", "mag", F32, FC.MX, "W")
    m.add_logical_node("PV1", "ZINV1", "ZINV")
    m.add_attribute("PV1", "ZINV1", "OutWSet", "setMag", F32, FC.SP, "W",
                    DataValue.float32(plant_config.pv_peak_w))
    m.add_attribute("PV1", "ZINV1", "MaxW", "setMag", F32, FC.CF, "W",
                    DataValue.float32(plant_config.pv_peak_w))
    m.add_attribute("PV1", "ZINV1", "InvSt", "stVal", BOOL, FC.ST, None, DataValue.bool(True))

    m.add_logical_node("BAT1", "ZBAT1", "ZBAT")
    m.add_attribute("BAT1", "ZBAT1", "Watt", "mag", F32, FC.MX, "W")
    m.add_attribute("BAT1", "ZBAT1", "SocPct", "mag", F32, FC.MX, "%",
                    DataValue.float32(plant_config.soc_init * 100.0))
    m.add_attribute("BAT1", "ZBAT1", "MaxWCha", "setMag", F32, FC.CF, "W",
                    DataValue.float32(plant_config.bat_max_w))
    m.add_attribute("BAT1", "ZBAT1", "MaxWDis", "setMag", F32, FC.CF, "W",
                    DataValue.float32(plant_config.bat_max_w))
    m.add_attribute("BAT1", "ZBAT1", "BatSt", "stVal", BOOL, FC.ST, None,
                    DataValue.bool(plant_config.battery_enabled))
    m.add_logical_node("BAT1", "ZBTC1", "ZBTC")
    m.add_attribute("BAT1", "ZBTC1", "WSpt", "setMag", F32, FC.SP, "W")

    m.add_logical_node("LOAD1", "MMXU1", "MMXU", "total load")
    m.add_attribute("LOAD1", "MMXU1", "TotW", "mag", F32, FC.MX, "W")
    for i, load in enumerate(plant_config.switchable_loads):
        ln = switch_load_node(i)
        m.add_logical_node("LOAD1", ln, "MMXU", load.name)
        m.add_attribute("LOAD1", ln, "TotW", "mag", F32, FC.MX, "W")
        m.add_attribute("LOAD1", ln, "SwSt", "ctlVal", BOOL, FC.CO)

    m.add_logical_node("GRID1", "MMXU1", "MMXU")
    m.add_attribute("GRID1", "MMXU1", "TotW", "mag", F32, FC.MX, "W")

    now = m.clock_us()
    for attr in m._index.values():
        attr.timestamp_us = now
    return m


def resolve(model: ServerModel, ref) -> AttributeHandle:
    return model.resolve(ref)


def read_value(model: ServerModel, ref) -> Tuple[DataValue, int]:
    return model.read_value(ref)


def write_value(model: ServerModel, ref, value: DataValue, channel: Channel) -> None:
    model.write_value(ref, value, channel)


def define_dataset(model: ServerModel, name: str, members: Sequence) -> DataSet:
    return model.define_dataset(name, members)
