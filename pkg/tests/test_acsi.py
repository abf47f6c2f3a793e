import struct
import threading
import time

import pytest
from hypothesis import given, strategies as st

from flexhome import acsi
from flexhome.acsi import (AcsiClient, AcsiServer, BindFailure, DirectoryResponse, GetDirectory, InvalidArgument,
                           LocalAcsiClient, ProtocolError, ProtocolErrorResponse, ReadRequest, ReadResponse,
                           ReportControl, ReportMode, ReportPush, Status, SubscribeReport, SubscribeResponse,
                           WriteRequest, WriteResponse, decode_message, encode_message, pack_envelope,
                           unpack_envelope)
from flexhome.iec_model import (BAT_SOC, BAT_SPT, GRID_W, PV_W, AccessDenied, Channel, NotFound, TypeMismatch,
                                build_home_model)
from flexhome.plant import PlantConfig
from flexhome.values import DataValue


@pytest.fixture
def model():
    m = build_home_model(PlantConfig())
    m.define_dataset("dsMeas", [GRID_W, PV_W])
    return m


@pytest.fixture
def server(model, tcp_port):
    srv = acsi.serve(model, port=tcp_port)
    yield srv
    srv.stop()


@pytest.fixture
def client(server):
    c = AcsiClient(port=server.port)
    yield c
    c.close()


def test_browse(client, model):
    assert client.browse() == model.browse()
    pv = acsi.client_browse(client, "PV1")
    assert pv == [p for p in model.browse() if p.startswith("PV1/")]
    assert len(pv) == 7


def test_read_write(client, model):
    model.write_value(BAT_SOC, DataValue.float32(72.5), Channel.PLANT)
    v, ts = acsi.client_read(client, BAT_SOC)
    assert v == DataValue.float32(72.5) and ts > 0
    acsi.client_write(client, BAT_SPT, DataValue.float32(-500.0))
    assert model.read_value(BAT_SPT)[0] == DataValue.float32(-500.0)


def test_error_statuses(client):
    assert client.write_status(GRID_W, DataValue.float32(1.0)) == Status.ACCESS_DENIED
    assert client.write_status(BAT_SPT, DataValue.bool(True)) == Status.TYPE_MISMATCH
    assert client.write_status("X/Y.Z.W", DataValue.bool(True)) == Status.NOT_FOUND
    with pytest.raises(AccessDenied):
        client.write(GRID_W, DataValue.float32(1.0))
    with pytest.raises(NotFound):
        client.read("PV1/MMET1.Irr.bad")
    with pytest.raises(TypeMismatch):
        client.write(BAT_SPT, DataValue.int32(1))


def test_requests_answered_in_order(client):
    for i in range(50):
        client.write(BAT_SPT, DataValue.float32(float(i)))
        assert client.read(BAT_SPT)[0] == DataValue.float32(float(i))


def test_concurrent_clients(server, model):
    model.write_value(GRID_W, DataValue.float32(321.0), Channel.PLANT)
    results, errors = [], []

    def worker():
        try:
            with_client = AcsiClient(port=server.port)
            try:
                for _ in range(100):
                    results.append(with_client.read(GRID_W)[0])
            finally:
                with_client.close()
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert results == [DataValue.float32(321.0)] * 400


def test_on_change_reports(client, model):
    pushes = []
    got = threading.Event()

    def cb(p):
        pushes.append(p)
        if len(pushes) == 2:
            got.set()

    acsi.subscribe_report(client, ReportControl("dsMeas"), cb)
    model.write_value(GRID_W, DataValue.float32(1.0), Channel.PLANT)
    model.write_value(BAT_SOC, DataValue.float32(60.0), Channel.PLANT)
    model.write_value(GRID_W, DataValue.float32(2.0), Channel.PLANT)
    assert got.wait(2.0)
    time.sleep(0.2)
    assert len(pushes) == 2
    assert [p.seq for p in pushes] == [1, 2]
    assert [p.entries[0][0] for p in pushes] == [DataValue.float32(1.0), DataValue.float32(2.0)]


def test_periodic_reports(client):
    pushes = []
    client.subscribe_report(ReportControl("dsMeas", ReportMode.PERIODIC, 100), pushes.append)
    time.sleep(1.0)
    n = len(pushes)
    assert 9 <= n <= 11
    seqs = [p.seq for p in pushes]
    assert seqs == sorted(seqs)


def test_subscribe_errors(client):
    with pytest.raises(NotFound):
        client.subscribe_report(ReportControl("nope"), print)
    with pytest.raises(InvalidArgument):
        client.subscribe_report(ReportControl("dsMeas", ReportMode.PERIODIC, 5), print)


def test_malformed_envelope_closes_connection(client):
    # length says 5 but the text16 inside claims 200 bytes
    client.send_raw(struct.pack(">IB", 5, 0x02) + b"\x00\xc8ab")
    resp = client.next_message()
    assert isinstance(resp, ProtocolErrorResponse)
    closed = client.next_message()
    assert isinstance(closed, Exception)
    with pytest.raises(ConnectionError):
        client.read(GRID_W)


def test_unknown_opcode_and_zero_length(server):
    for raw in (struct.pack(">IB", 1, 0x42), struct.pack(">I", 0)):
        c = AcsiClient(port=server.port)
        try:
            c.send_raw(raw)
            assert isinstance(c.next_message(), ProtocolErrorResponse)
        finally:
            c.close()


def test_bind_failure(server, model):
    with pytest.raises(BindFailure):
        AcsiServer(model, port=server.port).start()


def test_envelope_length_field():
    data = pack_envelope(ReadRequest("A/B.C.D"))
    assert struct.unpack(">I", data[:4])[0] == len(data) - 4
    assert unpack_envelope(data) == (0x02, data[5:])
    with pytest.raises(ProtocolError):
        unpack_envelope(data + b"\x00")


def test_request_hand_encoding():
    op, payload = encode_message(WriteRequest("a", DataValue.float32(-500.0)))
    assert (op, payload) == (0x03, b"\x00\x01a" + b"\x03" + struct.pack(">f", -500.0))
    assert encode_message(GetDirectory(""))[0] == 0x01
    assert encode_message(SubscribeReport(ReportControl("ds", ReportMode.PERIODIC, 100))) == (
        0x04, b"\x00\x02ds\x01\x00\x00\x00\x64")


refs = st.text(max_size=30)
dvals = st.one_of(st.booleans().map(DataValue.bool), st.floats(width=32).map(DataValue.float32),
                  st.integers(-2**31, 2**31 - 1).map(DataValue.int32), st.text(max_size=10).map(DataValue.text))
statuses = st.sampled_from(list(Status))
messages = st.one_of(
    st.builds(GetDirectory, refs),
    st.builds(ReadRequest, refs),
    st.builds(WriteRequest, refs, dvals),
    st.builds(SubscribeReport, st.builds(ReportControl, refs, st.sampled_from(list(ReportMode)),
                                         st.integers(0, 2**32 - 1))),
    st.builds(DirectoryResponse, st.just(Status.OK), st.lists(refs, max_size=5).map(tuple)),
    st.builds(ReadResponse, st.just(Status.OK), dvals, st.integers(0, 2**64 - 1)),
    statuses.filter(lambda s: s != Status.OK).map(ReadResponse),
    st.builds(WriteResponse, statuses),
    st.builds(SubscribeResponse, st.just(Status.OK), st.integers(0, 2**32 - 1)),
    st.builds(ReportPush, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), refs,
              st.lists(st.tuples(dvals, st.integers(0, 2**64 - 1)), max_size=4).map(tuple)),
    st.builds(ProtocolErrorResponse, statuses),
)


@given(messages)
def test_message_roundtrip(msg):
    assert decode_message(*unpack_envelope(pack_envelope(msg))) == msg


@pytest.mark.parametrize("encode", [True, False])
def test_local_client_matches_tcp_semantics(model, encode):
    srv = AcsiServer(model)
    c = LocalAcsiClient(srv, encode=encode)
    pushes = []
    c.subscribe_report(ReportControl("dsMeas"), pushes.append)
    c.write(BAT_SPT, DataValue.float32(3.0))
    model.write_value(PV_W, DataValue.float32(5.0), Channel.PLANT)
    assert c.read(BAT_SPT)[0] == DataValue.float32(3.0)
    assert c.write_status(GRID_W, DataValue.float32(0.0)) == Status.ACCESS_DENIED
    assert len(pushes) == 1 and pushes[0].entries[1][0] == DataValue.float32(5.0)
    c.close()
    model.write_value(PV_W, DataValue.float32(6.0), Channel.PLANT)
    assert len(pushes) == 1


def test_clocked_periodic_reports(model):
    now = [0.0]
    srv = AcsiServer(model, report_clock=lambda: now[0])
    c = LocalAcsiClient(srv)
    pushes = []
    c.subscribe_report(ReportControl("dsMeas", ReportMode.PERIODIC, 1000), pushes.append)
    for k in range(1, 11):
        now[0] = k * 0.5
        srv.tick_reports()
    assert [p.seq for p in pushes] == [1, 2, 3, 4, 5]
