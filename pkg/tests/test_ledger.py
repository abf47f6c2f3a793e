import random

import pytest
from hypothesis import given, strategies as st

from flexhome.ledger import (ZERO_HASH, Block, CapacityReport, Chain, ChainCorrupt, ChainLog, InvalidTx,
                             LedgerError, MeasurementReport, SetpointDispatch, append_block, encode_tx, load_chain,
                             verify_bytes, verify_chain)
from flexhome.values import Reader

import oracles

# digests of the two-block chain below, computed with the pure-Python SHA-256 in oracles.py
GENESIS_HEX = "802bbf1167e97e336bc7e1d1574466db744c7021efe0f0ff01ff7e352c44f56b"
BLOCK1_HEX = "f7ddd739f763c8ac2f0bd3922c238181d2d163d5e4728ce39c4050bb7e60acef"


def golden_chain():
    c = Chain(genesis_ts_us=0)
    append_block(c, [CapacityReport("hems-1", 4, -2000.0, 2000.0, (1000.0, 1250.5)),
                     SetpointDispatch("hems-1", 4, -1000.0)], 900_000_000)
    return c


def test_oracle_sha_agrees_with_reference_vectors():
    assert oracles.sha256(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert oracles.sha256(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_golden_two_block_digest():
    c = golden_chain()
    assert c.blocks[0].hash.hex() == GENESIS_HEX
    assert c.blocks[1].hash.hex() == BLOCK1_HEX
    assert c.blocks[1].prev_hash == c.blocks[0].hash
    expected = oracles.ledger_block(1, bytes.fromhex(GENESIS_HEX), 900_000_000, [
        oracles.tx_capacity("hems-1", 4, -2000.0, 2000.0, (1000.0, 1250.5)),
        oracles.tx_setpoint("hems-1", 4, -1000.0)])
    assert c.blocks[1].canonical() == expected


def test_tx_encodings_match_oracle():
    assert encode_tx(MeasurementReport("p", 7, 0.25, -12.0)) == oracles.tx_measurement("p", 7, 0.25, -12.0)
    assert encode_tx(SetpointDispatch("é", 0, 1.5)) == oracles.tx_setpoint("é", 0, 1.5)


def test_genesis_only_valid():
    c = Chain()
    assert verify_chain(c) is None
    assert c.head.prev_hash == ZERO_HASH


def test_tx_validation():
    with pytest.raises(InvalidTx):
        CapacityReport("p", 0, 100.0, 2000.0)
    with pytest.raises(InvalidTx):
        SetpointDispatch("p", -1, 0.0)
    with pytest.raises(InvalidTx):
        MeasurementReport("p", 0, -0.1, 0.0)
    with pytest.raises(InvalidTx):
        SetpointDispatch("p", 0, float("nan"))
    with pytest.raises(InvalidTx):
        Chain().append(["not a tx"], 0)


def test_timestamps_do_not_go_backwards():
    c = Chain(genesis_ts_us=100)
    assert c.append([], 50).timestamp_us == 100


def test_in_memory_tamper_detected():
    c = golden_chain()
    for _ in range(3):
        c.append([SetpointDispatch("x", 1, 2.0)], 10**9)
    b = c.blocks[2]
    c.blocks[2] = Block(b.index, b.prev_hash, b.timestamp_us + 1, b.txs, b.hash)
    assert verify_chain(c) == 2


def build_chain(n, seed=0):
    rng = random.Random(seed)
    c = Chain()
    for k in range(1, n):
        txs = [SetpointDispatch(f"p{j}", k, rng.uniform(-2000, 2000)) for j in range(rng.randint(0, 3))]
        if rng.random() < 0.3:
            txs.append(CapacityReport("hems-1", k, -2000.0, 2000.0, tuple(rng.uniform(0, 4000) for _ in range(3))))
        c.append(txs, k * 900_000_000)
    return c


def test_single_byte_mutation_detected_everywhere():
    data = build_chain(12).to_bytes()
    assert verify_bytes(data)[0] is None
    for pos in range(len(data)):
        mutated = bytearray(data)
        mutated[pos] ^= 0x01
        bad, statuses = verify_bytes(bytes(mutated))
        assert bad is not None, pos
        assert statuses[-1].ok is False


def test_mutation_reports_affected_block():
    c = build_chain(6)
    framed = [len(b.to_bytes()) + 4 for b in c.blocks]
    data = c.to_bytes()
    start = 0
    for idx, size in enumerate(framed):
        # mutate a byte inside the block body (skip the length prefix)
        pos = start + 4 + size // 2
        mutated = bytearray(data)
        mutated[pos] ^= 0xFF
        assert verify_bytes(bytes(mutated))[0] == idx
        start += size


@given(st.data())
def test_flip_any_byte_of_serialized_block(data):
    c = build_chain(4, seed=data.draw(st.integers(0, 1000)))
    raw = c.to_bytes()
    pos = data.draw(st.integers(0, len(raw) - 1))
    bit = data.draw(st.integers(0, 7))
    mutated = bytearray(raw)
    mutated[pos] ^= 1 << bit
    assert verify_bytes(bytes(mutated))[0] is not None


def test_block_roundtrip():
    for b in build_chain(5):
        assert Block.from_bytes(b.to_bytes()) == b


def test_truncated_log_and_empty_log():
    data = build_chain(3).to_bytes()
    bad, statuses = verify_bytes(data[:-5])
    assert bad == 2
    assert verify_bytes(b"")[0] == 0


def test_chain_log_persists_and_locks(tmp_path):
    path = tmp_path / "ledger.bin"
    log = ChainLog(path, genesis_ts_us=5)
    log.append([SetpointDispatch("a", 1, 1.0)], 10)
    with pytest.raises(LedgerError):
        ChainLog(path)
    log.close()
    again = ChainLog(path)
    assert len(again.chain) == 2
    again.append([], 20)
    again.close()
    assert len(load_chain(path)) == 3


def test_load_chain_rejects_tampering(tmp_path):
    path = tmp_path / "l.bin"
    data = bytearray(build_chain(4).to_bytes())
    data[-40] ^= 0x10
    path.write_bytes(bytes(data))
    with pytest.raises(ChainCorrupt):
        load_chain(path)


def test_reader_over_block_bytes():
    b = golden_chain().blocks[1]
    r = Reader(b.to_bytes())
    assert r.u64() == 1
