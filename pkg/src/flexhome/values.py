"""Typed data values and the TLV encoding shared by GOOSE frames and ACSI payloads."""
from __future__ import annotations

import math
import struct
from enum import IntEnum
from typing import Any, NamedTuple, Tuple


class CodecError(ValueError):
    """Base class for wire decoding/encoding failures."""


class Truncated(CodecError):
    pass


class UnsupportedVariant(CodecError):
    pass


class VType(IntEnum):
    BOOL = 0x01
    INT32 = 0x02
    FLOAT32 = 0x03
    FLOAT64 = 0x04
    TEXT = 0x05
    TIMESTAMP_US = 0x06


_F32 = struct.Struct(">f")
_F64 = struct.Struct(">d")
_I32 = struct.Struct(">i")
_U64 = struct.Struct(">Q")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


def to_float32(x: float) -> float:
    """Round a Python float to the nearest IEEE-754 binary32 value."""
    return _F32.unpack(_F32.pack(x))[0]


class DataValue(NamedTuple):
    """An immutable typed value. Floats compare by bit pattern."""

    vtype: VType
    value: Any

    @classmethod
    def bool(cls, v: bool) -> "DataValue":
        return cls(VType.BOOL, bool(v))

    @classmethod
    def int32(cls, v: int) -> "DataValue":
        v = int(v)
        if not -(2**31) <= v < 2**31:
            raise UnsupportedVariant(f"int32 out of range: {v}")
        return cls(VType.INT32, v)

    @classmethod
    def float32(cls, v: float) -> "DataValue":
        try:
            return cls(VType.FLOAT32, _F32.unpack(_F32.pack(float(v)))[0])
        except OverflowError:
            raise UnsupportedVariant(f"float32 out of range: {v}") from None

    @classmethod
    def float64(cls, v: float) -> "DataValue":
        return cls(VType.FLOAT64, float(v))

    @classmethod
    def text(cls, v: str) -> "DataValue":
        return cls(VType.TEXT, str(v))

    @classmethod
    def timestamp(cls, us: int) -> "DataValue":
        us = int(us)
        if not 0 <= us < 2**64:
            raise UnsupportedVariant(f"timestamp out of range: {us}")
        return cls(VType.TIMESTAMP_US, us)

    @classmethod
    def coerce(cls, vtype: VType, v: Any) -> "DataValue":
        """Build a value of ``vtype`` from a plain Python value (JSON side)."""
        if vtype is VType.BOOL:
            if not isinstance(v, bool):
                raise TypeError(f"expected bool, got {v!r}")
            return cls.bool(v)
        if vtype in (VType.FLOAT32, VType.FLOAT64):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError(f"expected number, got {v!r}")
            return cls.float32(v) if vtype is VType.FLOAT32 else cls.float64(v)
        if vtype in (VType.INT32, VType.TIMESTAMP_US):
            if isinstance(v, bool) or not isinstance(v, int):
                raise TypeError(f"expected integer, got {v!r}")
            return cls.int32(v) if vtype is VType.INT32 else cls.timestamp(v)
        if not isinstance(v, str):
            raise TypeError(f"expected text, got {v!r}")
        return cls.text(v)

    def _key(self) -> Tuple[VType, Any]:
        st = _FLOAT_STRUCT.get(self[0])
        return (self[0], st.pack(self[1])) if st is not None else (self[0], self[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DataValue):
            return NotImplemented
        t, a = self
        if t is not other[0]:
            return False
        b = other[1]
        if t in _FLOAT_STRUCT:
            # bit-pattern identity: NaN equals itself, -0.0 differs from 0.0
            if a == b:
                return a != 0.0 or math.copysign(1.0, a) == math.copysign(1.0, b)
            return a != a and b != b and _FLOAT_STRUCT[t].pack(a) == _FLOAT_STRUCT[t].pack(b)
        return type(a) is type(b) and a == b

    def __ne__(self, other: object) -> bool:
        eq = self.__eq__(other)
        return eq if eq is NotImplemented else not eq

    def __hash__(self) -> int:
        return hash(self._key())

    def __repr__(self) -> str:
        return f"{self[0].name}({self[1]!r})"


_FLOAT_STRUCT = {VType.FLOAT32: _F32, VType.FLOAT64: _F64}
_TAG_BYTE = {t: bytes((t.value,)) for t in VType}
_FIXED = {VType.INT32: _I32, VType.FLOAT32: _F32, VType.FLOAT64: _F64, VType.TIMESTAMP_US: _U64}
_BY_TAG = {t.value: t for t in VType}


def encode_value(v: DataValue) -> bytes:
    if not isinstance(v, DataValue) or not isinstance(v[0], VType):
        raise UnsupportedVariant(f"not a DataValue: {v!r}")
    t, x = v
    tag = _TAG_BYTE[t]
    st = _FIXED.get(t)
    try:
        if st is not None:
            return tag + st.pack(x)
        if t is VType.BOOL:
            return tag + (b"\x01" if x else b"\x00")
        raw = x.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UnsupportedVariant("text longer than 65535 bytes")
        return tag + _U16.pack(len(raw)) + raw
    except struct.error as exc:
        raise UnsupportedVariant(str(exc)) from exc


class Reader:
    """Bounds-checked big-endian cursor over a byte string."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def unpack(self, st: struct.Struct):
        pos = self.pos
        if pos + st.size > len(self.data):
            raise Truncated(f"need {st.size} bytes at offset {pos}, have {len(self.data) - pos}")
        self.pos = pos + st.size
        return st.unpack_from(self.data, pos)[0]

    def u8(self) -> int:
        pos = self.pos
        if pos >= len(self.data):
            raise Truncated(f"need 1 byte at offset {pos}, have 0")
        self.pos = pos + 1
        return self.data[pos]

    def u16(self) -> int:
        return self.unpack(_U16)

    def u32(self) -> int:
        return self.unpack(_U32)

    def u64(self) -> int:
        return self.unpack(_U64)

    def f64(self) -> float:
        return self.unpack(_F64)

    def text16(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 at offset {self.pos - n}") from exc

    def remaining(self) -> int:
        return len(self.data) - self.pos



def decode_value(r: Reader) -> DataValue:
    tag = r.u8()
    t = _BY_TAG.get(tag)
    if t is None:
        raise UnsupportedVariant(f"unknown value tag 0x{tag:02x}")
    st = _FIXED.get(t)
    if st is not None:
        return DataValue(t, r.unpack(st))
    if t is VType.BOOL:
        b = r.u8()
        if b > 1:
            raise CodecError(f"bool byte must be 0 or 1, got {b}")
        return DataValue(t, b == 1)
    return DataValue(t, r.text16())


def encode_text16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CodecError("text longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def to_plain(v: DataValue) -> Any:
    """JSON-friendly Python value."""
    return v.value
