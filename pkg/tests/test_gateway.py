import socket
import threading
import time
from types import SimpleNamespace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanet_hil.gateway import (
    HEADER_LEN,
    MAX_PAYLOAD,
    BadKind,
    BadMagic,
    BadVersion,
    Envelope,
    EnvelopeKind,
    Gateway,
    GatewayError,
    GatewayUnavailable,
    PortBinding,
    Side,
    TruncatedPayload,
    decode,
    encode,
)
from vanet_hil.kernel import Kernel, KernelMode
from vanet_hil.mobility import VehicleState
from vanet_hil.network import Fate, Network
from vanet_hil.radio import Frame, Kind, MacConfig

VEH = PortBinding(Side.VEHICLE, ("127.0.0.1", 0), ("127.0.0.1", 9), 0)
SRV = PortBinding(Side.SERVER, ("127.0.0.1", 0), ("127.0.0.1", 9), 1)


def to_sim(payload, ts=0):
    return Envelope(EnvelopeKind.TO_SIM, ts, payload).encode()


class FakeNet:
    def __init__(self, mtu=2304):
        self.mac = SimpleNamespace(mtu=mtu)
        self.frames = []

    def enqueue(self, frame):
        self.frames.append(frame)
        return True


def fake_gateway(mtu=2304):
    net = FakeNet(mtu)
    gw = Gateway(Kernel(), net, VEH, SRV)
    out = []
    gw.egress_hook = out.append
    return gw, net, out


def test_encode_control_empty():
    raw = encode(Envelope(EnvelopeKind.CONTROL, 0))
    assert raw[:6] == bytes.fromhex("5648494C0103")
    assert len(raw) == HEADER_LEN == 18
    assert raw[6:] == bytes(12)


@settings(max_examples=200)
@given(kind=st.sampled_from(list(EnvelopeKind)), ts=st.integers(0, 2**64 - 1),
       payload=st.binary(max_size=2000))
def test_round_trip(kind, ts, payload):
    env = Envelope(kind, ts, payload)
    assert decode(env.encode()) == env


def test_decode_errors():
    good = to_sim(b"abc", 5)
    with pytest.raises(BadMagic):
        decode(b"XHIL" + good[4:])
    with pytest.raises(BadVersion):
        decode(good[:4] + b"\x02" + good[5:])
    with pytest.raises(BadKind):
        decode(good[:5] + b"\x09" + good[6:])
    with pytest.raises(TruncatedPayload):
        decode(good[:-1])
    with pytest.raises(TruncatedPayload):
        decode(good[:10])


def test_encode_rejects_oversize():
    Envelope(EnvelopeKind.TO_SIM, 0, bytes(MAX_PAYLOAD)).encode()
    with pytest.raises(GatewayError):
        Envelope(EnvelopeKind.TO_SIM, 0, bytes(MAX_PAYLOAD + 1)).encode()


def test_wrong_kind_counted_not_forwarded():
    gw, net, _ = fake_gateway()
    assert gw.ingest(Envelope(EnvelopeKind.FROM_SIM, 0, b"x").encode()) == 0
    assert gw.ingest(b"garbage") == 0
    assert gw.counters.wrong_kind == 1 and gw.counters.decode_errors == 1
    assert net.frames == [] and gw.counters.ingested == 0


def test_fifo_order_of_ingested_datagrams():
    gw, net, _ = fake_gateway()
    for p in (b"one", b"two", b"three"):
        gw.ingest(to_sim(p))
    assert [f.payload for f in net.frames] == [b"one", b"two", b"three"]
    assert [f.seq_in_stream for f in net.frames] == [0, 1, 2]
    assert all(f.src == 0 and f.dst == 1 for f in net.frames)


def test_delivered_payload_egresses_exactly():
    gw, net, out = fake_gateway()
    gw.ingest(to_sim(b"P" * 100))
    (f,) = net.frames
    gw.handle_fate(f, Fate.DELIVERED, 10)
    (raw,) = out
    env = decode(raw)
    assert env.kind is EnvelopeKind.FROM_SIM and env.payload == b"P" * 100


def test_collided_frame_has_no_egress():
    gw, net, out = fake_gateway()
    gw.ingest(to_sim(b"x" * 5000))
    a, b, c = net.frames
    gw.handle_fate(a, Fate.DELIVERED, 1)
    gw.handle_fate(b, Fate.COLLIDED, 2)
    gw.handle_fate(c, Fate.DELIVERED, 3)
    assert out == []
    assert gw.counters.collided == 1 and gw.counters.pending() == 0


def test_shaping_thins_and_counts():
    gw, net, _ = fake_gateway()
    gw.multiplier = 0.25
    for _ in range(8):
        gw.ingest(to_sim(b"x"))
    assert len(net.frames) == 2
    assert gw.counters.shaped == 6 and gw.counters.dropped == 6


@pytest.mark.parametrize("n", [1, 18, 1000, MAX_PAYLOAD - 18, MAX_PAYLOAD])
def test_byte_transparency_through_simulated_medium(n):
    k = Kernel()
    net = Network(k, [VehicleState(0, 140.0, 45.0)], mac=MacConfig(queue_limit=1000))
    gw = Gateway(k, net, VEH, PortBinding(Side.SERVER, SRV.local, SRV.peer, net.server_id))
    out = []
    gw.egress_hook = out.append
    net.on_fate = gw.handle_fate
    payload = bytes((i * 7 + 3) % 256 for i in range(n))
    frames = gw.ingest(to_sim(payload))
    assert frames == -(-n // 2304)
    k.run_until(10**6)
    assert [decode(r).payload for r in out] == [payload]
    c = gw.counters
    assert c.ingested == c.delivered + c.collided + c.dropped + c.pending()
    assert c.delivered == 1


def test_counter_conservation_under_contention():
    k = Kernel()
    fleet = [VehicleState(0, 100.0, 45.0), VehicleState(1, 110.0, 55.0)]
    net = Network(k, fleet, mac=MacConfig(queue_limit=30), seed=3)
    gw = Gateway(k, net, VEH, PortBinding(Side.SERVER, SRV.local, SRV.peer, net.server_id))
    gw.egress_hook = lambda raw: None
    net.on_fate = gw.handle_fate
    for i in range(400):
        k.schedule(i * 300, lambda p: gw.ingest(to_sim(b"y" * 3000)), payload=i)
        k.schedule(i * 300, lambda p: net.enqueue(Frame(1, net.server_id, 1500, k.now, Kind.PROBE, "bg", p)),
                   payload=i)
    k.run_until(5 * 10**6)
    c = gw.counters
    assert c.collided + c.dropped > 0
    assert c.ingested == 400 == c.delivered + c.collided + c.dropped + c.pending()
    assert c.pending() == 0
    assert c.egressed == c.delivered


def test_open_fails_when_port_taken():
    blocker = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    blocker.bind(("127.0.0.1", 0))
    try:
        taken = PortBinding(Side.VEHICLE, blocker.getsockname(), ("127.0.0.1", 9), 0)
        gw = Gateway(Kernel(), FakeNet(), taken, SRV)
        with pytest.raises(GatewayUnavailable):
            gw.open()
    finally:
        blocker.close()


@pytest.mark.realtime
def test_udp_loopback_round_trip_latency():
    budget = 5000
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    sink.settimeout(3.0)
    k = Kernel(KernelMode.real_time(budget))
    net = Network(k, [VehicleState(0, 140.0, 45.0)], ideal_delay_us=0)
    server = PortBinding(Side.SERVER, ("127.0.0.1", 0), sink.getsockname(), net.server_id)
    gw = Gateway(k, net, VEH, server)
    net.on_fate = gw.handle_fate
    gw.open()
    target = gw.bound_address(Side.VEHICLE)
    result = {}

    def client():
        tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        time.sleep(0.3)
        t0 = time.perf_counter()
        tx.sendto(to_sim(b"ping" * 50), target)
        result["raw"] = sink.recv(70_000)
        result["rtt"] = time.perf_counter() - t0
        tx.close()

    th = threading.Thread(target=client)
    th.start()
    try:
        k.run_realtime(1_000_000)
    finally:
        gw.close()
        th.join()
        sink.close()
    assert decode(result["raw"]).payload == b"ping" * 50
    assert result["rtt"] < 2 * budget / 1e6
