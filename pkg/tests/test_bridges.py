import time

import pytest
from hypothesis import given, strategies as st

from flexhome import bridges
from flexhome.acsi import AcsiClient, AcsiServer, LocalAcsiClient
from flexhome.bridges import (DeviceConfig, DeviceMessage, DeviceUnreachable, Iec61850Agent, InvalidMessage,
                              IoTAgent, MappingError, MessageKind, NotCommandable, NotificationEndpoint,
                              SimulatedPlug, entity_to_path, path_to_entity)
from flexhome.broker import BrokerClient, BrokerServer, EntityStore, LocalBrokerClient, Notifier
from flexhome.iec_model import BAT_SOC, BAT_SPT, GRID_W, INV_MAXW, Channel, build_home_model
from flexhome.plant import PlantConfig
from flexhome.values import DataValue


def local_broker():
    return LocalBrokerClient(EntityStore(notifier=Notifier(synchronous=True)))


def test_mapping_examples():
    assert path_to_entity("BAT1/ZBAT1.SocPct.mag") == ("urn:dev:BAT1-ZBAT1", "SocPct_mag")
    assert entity_to_path("urn:dev:BAT1-ZBTC1", "WSpt_setMag") == "BAT1/ZBTC1.WSpt.setMag"
    for eid, attr in [("dev:BAT1-ZBAT1", "a_b"), ("urn:dev:BAT1", "a_b"), ("urn:dev:A-B", "nounderscore")]:
        with pytest.raises(MappingError):
            entity_to_path(eid, attr)


def test_mapping_bijective_on_home_model():
    paths = build_home_model(PlantConfig()).browse()
    images = [path_to_entity(p) for p in paths]
    assert len(set(images)) == len(paths)
    assert [entity_to_path(*i) for i in images] == paths


@given(st.from_regex(r"[A-Z][A-Z0-9]{0,5}", fullmatch=True), st.from_regex(r"[A-Z]{4}[0-9]{1,2}", fullmatch=True),
       st.from_regex(r"[A-Z][A-Za-z]{0,7}", fullmatch=True), st.from_regex(r"[a-z][A-Za-z]{0,6}", fullmatch=True))
def test_map_unmap_identity(ld, ln, do, da):
    p = f"{ld}/{ln}.{do}.{da}"
    assert entity_to_path(*path_to_entity(p)) == p


def plug_agent(broker=None, **kw):
    broker = broker or local_broker()
    plug = SimulatedPlug("toaster1")
    agent = IoTAgent(broker, [DeviceConfig("toaster1", "http://plug.invalid/cmd", "SmartPlug", ("on",),
                                           {"power_w": "W"})], **kw)
    agent.register_local("http://plug.invalid/cmd", plug.handle)
    agent.provision()
    return broker, agent, plug


def test_iot_ingest_measurement():
    broker, agent, plug = plug_agent()
    msg = DeviceMessage("toaster1", MessageKind.MEASUREMENT, {"power_w": 700}, 1)
    assert bridges.iot_ingest(agent, msg)
    ent = broker.get("urn:dev:toaster1")
    assert ent["power_w"]["value"] == 700
    assert ent["power_w"]["metadata"]["unit"] == "W"


def test_iot_unknown_device_dropped():
    broker, agent, _ = plug_agent()
    before = broker.query()
    assert not agent.ingest(DeviceMessage("ghost", MessageKind.MEASUREMENT, {"x": 1}))
    assert broker.query() == before and agent.dropped == 1


def test_invalid_device_messages():
    with pytest.raises(InvalidMessage):
        DeviceMessage("toaster1", MessageKind.MEASUREMENT, {})
    with pytest.raises(InvalidMessage):
        DeviceMessage.from_json({"deviceId": "x", "kind": "Bogus", "readings": {"a": 1}})
    with pytest.raises(InvalidMessage):
        DeviceMessage.from_json({"deviceId": "x", "kind": "Measurement", "readings": {"a": "str"}})
    msg = DeviceMessage("x", MessageKind.COMMAND_ACK, {"on": True}, 5)
    assert DeviceMessage.from_json(msg.to_json()) == msg


def test_iot_command_and_ack():
    broker, agent, plug = plug_agent()
    ack = bridges.iot_command(agent, "urn:dev:toaster1", "on", True)
    assert plug.received == [{"set": {"on": True}}]
    assert ack.readings == {"on": True}
    assert broker.get("urn:dev:toaster1")["on_status"]["value"] is True
    with pytest.raises(NotCommandable):
        agent.command("urn:dev:toaster1", "power_w", 1)


def test_iot_command_via_broker_attribute():
    broker, agent, plug = plug_agent()
    broker.patch_attrs("urn:dev:toaster1", {"on": True})
    assert plug.on
    broker.patch_attrs("urn:dev:toaster1", {"on": False})
    assert not plug.on and len(plug.received) == 2


def test_device_unreachable_after_retries():
    calls = []

    def down(url, body):
        calls.append(url)
        raise ConnectionRefusedError("offline")

    broker = local_broker()
    agent = IoTAgent(broker, [DeviceConfig("p", "http://127.0.0.1:1/x", commandable=("on",))], post=down,
                     backoff_s=0.0)
    with pytest.raises(DeviceUnreachable):
        agent.command("urn:dev:p", "on", True)
    assert len(calls) == 4


def bridge_setup(encode=True):
    model = build_home_model(PlantConfig())
    model.define_dataset("Mirror", [BAT_SOC, GRID_W])
    srv = AcsiServer(model)
    broker = local_broker()
    agent = Iec61850Agent(broker, LocalAcsiClient(srv, encode=encode), {"Mirror": [BAT_SOC, GRID_W]})
    bridges.i61850_sync(agent)
    return model, broker, agent


def test_61850_initial_upload_and_reports():
    model, broker, agent = bridge_setup()
    assert broker.get("urn:dev:BAT1-ZBAT1")["SocPct_mag"]["value"] == 50.0
    assert "WSpt_setMag" not in broker.get("urn:dev:BAT1-ZBTC1")
    model.write_value(BAT_SOC, DataValue.float32(72.5), Channel.PLANT)
    assert broker.get("urn:dev:BAT1-ZBAT1")["SocPct_mag"]["value"] == 72.5


def test_61850_write_through_without_echo():
    model, broker, agent = bridge_setup()
    broker.patch_attrs("urn:dev:BAT1-ZBTC1", {"WSpt_setMag": -500.0})
    assert model.read_value(BAT_SPT)[0] == DataValue.float32(-500.0)
    assert agent.writes == 1
    model.write_value(BAT_SOC, DataValue.float32(40.0), Channel.PLANT)
    assert agent.writes == 1


def test_61850_access_denied_annotated():
    model, broker, agent = bridge_setup()
    broker.patch_attrs("urn:dev:PV1-ZINV1", {"MaxW_setMag": 1.0})
    ent = broker.get("urn:dev:PV1-ZINV1")
    assert "AccessDenied" in ent["error"]["value"]
    assert model.read_value(INV_MAXW)[0] == DataValue.float32(4000.0)
    broker.patch_attrs("urn:dev:BAT1-ZBTC1", {"WSpt_setMag": "high"})
    assert agent.errors == 2
    broker.patch_attrs("urn:dev:BAT1-ZBTC1", {"WSpt_setMag": 10.0})
    assert model.read_value(BAT_SPT)[0] == DataValue.float32(10.0)


def test_61850_over_real_transports(tcp_port):
    model = build_home_model(PlantConfig())
    model.define_dataset("Mirror", [BAT_SOC])
    srv = AcsiServer(model, port=tcp_port).start()
    store = EntityStore()
    bsrv = BrokerServer(store, port=0).start()
    endpoint = NotificationEndpoint()
    client = AcsiClient(port=srv.port)
    try:
        http = BrokerClient(bsrv.url)
        agent = Iec61850Agent(http, client, {"Mirror": [BAT_SOC]})
        agent.start(endpoint)
        t0 = time.monotonic()
        http.patch_attrs("urn:dev:BAT1-ZBTC1", {"WSpt_setMag": -750.0})
        while model.read_value(BAT_SPT)[0] != DataValue.float32(-750.0):
            assert time.monotonic() - t0 < 1.0
            time.sleep(0.005)
        model.write_value(BAT_SOC, DataValue.float32(61.0), Channel.PLANT)
        while http.get("urn:dev:BAT1-ZBAT1")["SocPct_mag"]["value"] != 61.0:
            assert time.monotonic() - t0 < 2.0
            time.sleep(0.005)
    finally:
        client.close()
        endpoint.close()
        bsrv.stop()
        store.close()
        srv.stop()


def test_plug_over_http_endpoint():
    endpoint = NotificationEndpoint()
    plug = SimulatedPlug("p1")
    try:
        url = endpoint.route("/dev/p1", plug.handle)
        agent = IoTAgent(local_broker(), [DeviceConfig("p1", url, commandable=("on",))])
        agent.provision()
        agent.command("urn:dev:p1", "on", True)
        assert plug.on and plug.power_w == 700.0
    finally:
        endpoint.close()
