"""Append-only hash chain of typed transactions.

Canonical block bytes, all integers big-endian::

    u64 index | 32B prevHash | u64 timestampUs | u16 txCount | tx* | 64B signature (zero)

Each tx starts with a u8 tag; text is u16 length + UTF-8, floats are IEEE-754
doubles, lists are u16 count + items. A block's hash is SHA-256 of its
canonical bytes. On disk every block is stored as ``u32 length`` followed by
the canonical bytes and the 32-byte hash.
"""
from __future__ import annotations

import fcntl
import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

from .values import CodecError, Reader, encode_text16

HASH_LEN = 32
SIG_LEN = 64
ZERO_HASH = bytes(HASH_LEN)
MAX_U32 = 0xFFFFFFFF

_BLOCK_HEAD = struct.Struct(">Q32sQH")
_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


class LedgerError(Exception):
    pass


class InvalidTx(LedgerError, ValueError):
    pass


class ChainCorrupt(LedgerError):
    def __init__(self, index: int, reason: str):
        self.index = index
        super().__init__(f"block {index}: {reason}")


def _check_common(prosumer_id: str, interval_idx: int) -> None:
    if not isinstance(prosumer_id, str) or not prosumer_id:
        raise InvalidTx("prosumer id must be a non-empty string")
    if len(prosumer_id.encode()) > 0xFFFF:
        raise InvalidTx("prosumer id too long")
    if isinstance(interval_idx, bool) or not isinstance(interval_idx, int) or not 0 <= interval_idx <= MAX_U32:
        raise InvalidTx(f"interval index {interval_idx!r} out of range")


def _finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise InvalidTx(f"non-finite value {x!r}")


@dataclass(frozen=True)
class CapacityReport:
    prosumer_id: str
    interval_idx: int
    p_min_w: float
    p_max_w: float
    expected_profile_w: Tuple[float, ...] = ()
    TAG = 1

    def __post_init__(self):
        _check_common(self.prosumer_id, self.interval_idx)
        _finite(self.p_min_w, self.p_max_w, *self.expected_profile_w)
        if not self.p_min_w <= 0 <= self.p_max_w:
            raise InvalidTx("capacity must satisfy pMin <= 0 <= pMax")
        if len(self.expected_profile_w) > 0xFFFF:
            raise InvalidTx("expected profile too long")
        object.__setattr__(self, "expected_profile_w", tuple(float(x) for x in self.expected_profile_w))


@dataclass(frozen=True)
class SetpointDispatch:
    prosumer_id: str
    interval_idx: int
    p_ref_w: float
    TAG = 2

    def __post_init__(self):
        _check_common(self.prosumer_id, self.interval_idx)
        _finite(self.p_ref_w)


@dataclass(frozen=True)
class MeasurementReport:
    prosumer_id: str
    interval_idx: int
    energy_error_kwh: float
    mean_p_grid_w: float
    TAG = 3

    def __post_init__(self):
        _check_common(self.prosumer_id, self.interval_idx)
        _finite(self.energy_error_kwh, self.mean_p_grid_w)
        if self.energy_error_kwh < 0:
            raise InvalidTx("energy error must be non-negative")


Tx = Union[CapacityReport, SetpointDispatch, MeasurementReport]


def encode_tx(tx: Tx) -> bytes:
    out = bytearray(_U8.pack(tx.TAG))
    out += encode_text16(tx.prosumer_id)
    out += _U32.pack(tx.interval_idx)
    if isinstance(tx, CapacityReport):
        out += _F64.pack(tx.p_min_w) + _F64.pack(tx.p_max_w)
        out += _U16.pack(len(tx.expected_profile_w))
        for x in tx.expected_profile_w:
            out += _F64.pack(x)
    elif isinstance(tx, SetpointDispatch):
        out += _F64.pack(tx.p_ref_w)
    elif isinstance(tx, MeasurementReport):
        out += _F64.pack(tx.energy_error_kwh) + _F64.pack(tx.mean_p_grid_w)
    else:
        raise InvalidTx(f"not a transaction: {tx!r}")
    return bytes(out)


def decode_tx(r: Reader) -> Tx:
    tag = r.u8()
    pid = r.text16()
    idx = r.u32()
    try:
        if tag == CapacityReport.TAG:
            lo, hi = r.f64(), r.f64()
            profile = tuple(r.f64() for _ in range(r.u16()))
            return CapacityReport(pid, idx, lo, hi, profile)
        if tag == SetpointDispatch.TAG:
            return SetpointDispatch(pid, idx, r.f64())
        if tag == MeasurementReport.TAG:
            return MeasurementReport(pid, idx, r.f64(), r.f64())
    except InvalidTx as exc:
        raise CodecError(f"invalid transaction: {exc}") from None
    raise CodecError(f"unknown transaction tag {tag}")


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    timestamp_us: int
    txs: Tuple[Tx, ...] = ()
    hash: bytes = field(default=b"", compare=False)

    def canonical(self) -> bytes:
        if len(self.txs) > 0xFFFF:
            raise LedgerError("too many transactions in one block")
        head = _BLOCK_HEAD.pack(self.index, self.prev_hash, self.timestamp_us, len(self.txs))
        return head + b"".join(encode_tx(t) for t in self.txs) + bytes(SIG_LEN)

    def compute_hash(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    def sealed(self) -> "Block":
        return Block(self.index, self.prev_hash, self.timestamp_us, self.txs, self.compute_hash())

    def to_bytes(self) -> bytes:
        return self.canonical() + self.hash

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        r = Reader(data)
        index, prev, ts, n = _BLOCK_HEAD.unpack(r.take(_BLOCK_HEAD.size))
        txs = tuple(decode_tx(r) for _ in range(n))
        if r.take(SIG_LEN) != bytes(SIG_LEN):
            raise CodecError("signature field must be zero")
        digest = r.take(HASH_LEN)
        if r.remaining():
            raise CodecError(f"{r.remaining()} trailing bytes after block")
        return cls(index, prev, ts, txs, digest)


class Chain:
    """In-memory chain starting from a genesis block with no transactions."""

    def __init__(self, blocks: Optional[Sequence[Block]] = None, genesis_ts_us: int = 0):
        self.blocks: List[Block] = list(blocks) if blocks is not None else [
            Block(0, ZERO_HASH, genesis_ts_us).sealed()]
        if not self.blocks:
            raise LedgerError("a chain needs at least a genesis block")

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def append(self, txs: Sequence[Tx], now_us: int) -> Block:
        for tx in txs:
            if not isinstance(tx, (CapacityReport, SetpointDispatch, MeasurementReport)):
                raise InvalidTx(f"not a transaction: {tx!r}")
        ts = max(int(now_us), self.head.timestamp_us)
        block = Block(self.head.index + 1, self.head.hash, ts, tuple(txs)).sealed()
        self.blocks.append(block)
        return block

    def to_bytes(self) -> bytes:
        return b"".join(frame_block(b) for b in self.blocks)


def append_block(chain: Chain, txs: Sequence[Tx], now_us: int) -> Block:
    return chain.append(txs, now_us)


def frame_block(block: Block) -> bytes:
    data = block.to_bytes()
    return _U32.pack(len(data)) + data


def verify_chain(chain: Union[Chain, Sequence[Block]]) -> Optional[int]:
    """Index of the first block whose hash or link is wrong, or None if all hold."""
    prev = ZERO_HASH
    for pos, block in enumerate(chain):
        if block.index != pos or block.prev_hash != prev or block.compute_hash() != block.hash:
            return pos
        prev = block.hash
    return None


def iter_records(data: bytes) -> Iterator[Tuple[int, bytes]]:
    """Yield ``(position, block bytes)``; raise ChainCorrupt on broken framing."""
    off = pos = 0
    while off < len(data):
        if len(data) - off < _U32.size:
            raise ChainCorrupt(pos, "truncated length prefix")
        (n,) = _U32.unpack_from(data, off)
        off += _U32.size
        if n > len(data) - off:
            raise ChainCorrupt(pos, f"record of {n} bytes runs past end of log")
        yield pos, data[off:off + n]
        off += n
        pos += 1


@dataclass(frozen=True)
class BlockStatus:
    index: int
    ok: bool
    reason: str = ""


def verify_bytes(data: bytes) -> Tuple[Optional[int], List[BlockStatus]]:
    """Check a serialized log; returns (first bad index or None, per-block status up to it)."""
    statuses: List[BlockStatus] = []
    prev = ZERO_HASH
    try:
        for pos, raw in iter_records(data):
            try:
                block = Block.from_bytes(raw)
            except CodecError as exc:
                statuses.append(BlockStatus(pos, False, f"undecodable: {exc}"))
                return pos, statuses
            reason = ""
            if block.index != pos:
                reason = f"index {block.index} at position {pos}"
            elif block.prev_hash != prev:
                reason = "prevHash does not match previous block"
            elif block.compute_hash() != block.hash:
                reason = "hash mismatch"
            statuses.append(BlockStatus(pos, not reason, reason))
            if reason:
                return pos, statuses
            prev = block.hash
    except ChainCorrupt as exc:
        statuses.append(BlockStatus(exc.index, False, str(exc)))
        return exc.index, statuses
    if not statuses:
        statuses.append(BlockStatus(0, False, "empty log"))
        return 0, statuses
    return None, statuses


def load_chain(path) -> Chain:
    data = Path(path).read_bytes()
    bad, statuses = verify_bytes(data)
    if bad is not None:
        raise ChainCorrupt(bad, statuses[-1].reason)
    return Chain([Block.from_bytes(raw) for _, raw in iter_records(data)])


class ChainLog:
    """File-backed chain with a single exclusive writer."""

    def __init__(self, path, genesis_ts_us: int = 0):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a+b")
        try:
            fcntl.flock(self._fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._fh.close()
            raise LedgerError(f"{self.path} is locked by another writer") from None
        if self.path.stat().st_size:
            self.chain = load_chain(self.path)
        else:
            self.chain = Chain(genesis_ts_us=genesis_ts_us)
            self._write(self.chain.head)

    def _write(self, block: Block) -> None:
        self._fh.write(frame_block(block))
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, txs: Sequence[Tx], now_us: int) -> Block:
        block = self.chain.append(txs, now_us)
        self._write(block)
        return block

    def close(self) -> None:
        if not self._fh.closed:
            fcntl.flock(self._fh, fcntl.LOCK_UN)
            self._fh.close()
