"""Hardware-in-the-loop bridge between real datagram endpoints and simulated nodes.

Wire format (big-endian)::

    offset  size  field
    0       4     magic "VHIL"
    4       1     version (1)
    5       1     kind: 1=ToSim, 2=FromSim, 3=Control
    6       8     timestamp_us, sender wall clock since the Unix epoch
    14      4     payload_len
    18      n     payload

The vehicle port feeds node 0; the server port emits whatever the edge-server
node receives. Datagrams larger than the MAC MTU cross the medium as numbered
fragments and are reassembled before egress.
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

from .kernel import Kernel
from .network import Fate, Network
from .radio import Frame, Kind
from .traffic import StreamRecord, fragment_sizes

log = logging.getLogger(__name__)

MAGIC = b"VHIL"
VERSION = 1
HEADER = struct.Struct(">4sBBQI")
HEADER_LEN = HEADER.size  # 18
MAX_DATAGRAM = 65_507
MAX_PAYLOAD = MAX_DATAGRAM - HEADER_LEN

VEHICLE_SUBNET = "192.168.5.0/24"
SERVER_SUBNET = "192.168.3.0/24"
GATEWAY_STREAM = "gateway"


class EnvelopeKind(enum.IntEnum):
    TO_SIM = 1
    FROM_SIM = 2
    CONTROL = 3


class GatewayError(ValueError):
    pass


class BadMagic(GatewayError):
    pass


class BadVersion(GatewayError):
    pass


class BadKind(GatewayError):
    pass


class TruncatedPayload(GatewayError):
    pass


class GatewayUnavailable(OSError):
    pass


@dataclass(frozen=True)
class Envelope:
    kind: EnvelopeKind
    timestamp_us: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise GatewayError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")
        if not 0 <= self.timestamp_us < 1 << 64:
            raise GatewayError("timestamp out of range")
        return HEADER.pack(MAGIC, VERSION, int(self.kind), self.timestamp_us, len(self.payload)) + self.payload


def encode(envelope: Envelope) -> bytes:
    return envelope.encode()


def decode(data: bytes) -> Envelope:
    if len(data) < HEADER_LEN:
        raise TruncatedPayload(f"{len(data)} bytes is shorter than the header")
    magic, version, kind, ts, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(repr(magic))
    if version != VERSION:
        raise BadVersion(str(version))
    try:
        kind = EnvelopeKind(kind)
    except ValueError:
        raise BadKind(str(kind)) from None
    if len(data) != HEADER_LEN + n:
        raise TruncatedPayload(f"header announces {n} payload bytes, datagram carries {len(data) - HEADER_LEN}")
    return Envelope(kind, ts, bytes(data[HEADER_LEN:]))


def wall_us() -> int:
    return time.time_ns() // 1000


class Side(enum.Enum):
    VEHICLE = "vehicle"
    SERVER = "server"


@dataclass
class PortBinding:
    side: Side
    local: tuple[str, int]
    peer: tuple[str, int]
    node_id: int
    # address label from the physical testbed's IP plan
    label: str = ""


@dataclass
class GatewayCounters:
    ingested: int = 0
    delivered: int = 0
    collided: int = 0
    dropped: int = 0
    decode_errors: int = 0
    wrong_kind: int = 0
    shaped: int = 0
    peer_unreachable: int = 0
    egressed: int = 0

    def pending(self) -> int:
        return self.ingested - self.delivered - self.collided - self.dropped


@dataclass
class _Pending:
    payload: bytes
    parts: int
    arrived: int = 0
    settled: int = 0
    failed: Fate | None = None


class Gateway:
    """Bridges encapsulated datagrams into a :class:`Network` and back out.

    ``ingest`` and ``handle_fate`` run on the kernel thread. Port readers
    started by :meth:`open` only push raw datagrams into the kernel's
    injection queue.
    """

    def __init__(self, kernel: Kernel, network: Network, vehicle: PortBinding, server: PortBinding,
                 mtu: int | None = None):
        if vehicle.node_id != 0:
            raise ValueError("the vehicle port attaches to node 0")
        self.kernel = kernel
        self.network = network
        self.vehicle = vehicle
        self.server = server
        self.mtu = mtu or network.mac.mtu
        self.counters = GatewayCounters()
        self.record = StreamRecord(GATEWAY_STREAM)
        self.multiplier = 1.0
        self._credit = 0.0
        self._pending: dict[int, _Pending] = {}
        self._next_id = 0
        self._sockets: dict[Side, socket.socket] = {}
        self._readers: list[threading.Thread] = []
        self._stop = threading.Event()
        self.egress_hook: Callable[[bytes], None] | None = None

    # -- kernel-thread side ----------------------------------------------

    def ingest(self, data: bytes, port: PortBinding | None = None) -> int:
        """Decode one datagram and queue its frames at the port's node. Returns frames queued."""
        port = port or self.vehicle
        try:
            env = decode(data)
        except GatewayError as exc:
            self.counters.decode_errors += 1
            log.debug("dropping undecodable datagram: %s", exc)
            return 0
        if env.kind is not EnvelopeKind.TO_SIM:
            self.counters.wrong_kind += 1
            return 0
        self.counters.ingested += 1
        self._credit += self.multiplier
        if self._credit < 1.0 - 1e-9:
            # thinned by the rate shaper before reaching the MAC
            self.counters.shaped += 1
            self.counters.dropped += 1
            return 0
        self._credit -= 1.0
        unit = self._next_id
        self._next_id += 1
        payload = env.payload
        sizes = fragment_sizes(max(len(payload), 1), self.mtu)
        self._pending[unit] = _Pending(payload, len(sizes))
        now = self.kernel.now
        offset = 0
        for i, size in enumerate(sizes):
            seq = self.record.sent(now, size, unit, len(sizes))
            chunk = payload[offset:offset + size]
            offset += size
            self.network.enqueue(Frame(port.node_id, self.server.node_id, size, now, Kind.PROBE,
                                       GATEWAY_STREAM, seq, unit, i, len(sizes), chunk))
        return len(sizes)

    def handle_fate(self, frame: Frame, fate: Fate, t: int) -> None:
        if frame.stream_id != GATEWAY_STREAM:
            return
        entry = self._pending.get(frame.unit)
        if entry is None:
            return
        entry.settled += 1
        if fate is Fate.DELIVERED:
            entry.arrived += 1
        elif entry.failed is None:
            entry.failed = fate
        if entry.settled < entry.parts:
            return
        del self._pending[frame.unit]
        if entry.failed is None:
            self.counters.delivered += 1
            self.egress(entry.payload)
        elif entry.failed is Fate.DROPPED:
            self.counters.dropped += 1
        else:
            self.counters.collided += 1

    def egress(self, payload: bytes) -> None:
        data = Envelope(EnvelopeKind.FROM_SIM, wall_us(), payload).encode()
        if self.egress_hook is not None:
            self.egress_hook(data)
            self.counters.egressed += 1
            return
        sock = self._sockets.get(Side.SERVER)
        if sock is None:
            self.counters.peer_unreachable += 1
            return
        try:
            sock.sendto(data, self.server.peer)
            self.counters.egressed += 1
        except OSError:
            self.counters.peer_unreachable += 1

    # -- sockets ----------------------------------------------------------

    def open(self) -> None:
        """Bind both ports and start the vehicle-side reader thread."""
        try:
            for side, port in ((Side.VEHICLE, self.vehicle), (Side.SERVER, self.server)):
                sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
                sock.bind(port.local)
                self._sockets[side] = sock
        except OSError as exc:
            self.close()
            raise GatewayUnavailable(f"cannot bind gateway ports: {exc}") from exc
        self._sockets[Side.SERVER].setblocking(False)
        reader = threading.Thread(target=self._read_loop, args=(self._sockets[Side.VEHICLE], self.vehicle),
                                  name="gateway-vehicle", daemon=True)
        reader.start()
        self._readers.append(reader)

    def _read_loop(self, sock: socket.socket, port: PortBinding) -> None:
        sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data = sock.recv(MAX_DATAGRAM + 1)
            except socket.timeout:
                continue
            except OSError:
                break
            self.kernel.inject(self._ingest_payload, (data, port), "gateway")

    def _ingest_payload(self, item: tuple[bytes, PortBinding]) -> None:
        self.ingest(*item)

    def close(self) -> None:
        self._stop.set()
        for t in self._readers:
            t.join(timeout=1.0)
        for sock in self._sockets.values():
            sock.close()
        self._sockets.clear()
        self._readers.clear()

    def bound_address(self, side: Side) -> tuple[str, int]:
        return self._sockets[side].getsockname()


def default_ports(server_node: int, host: str = "127.0.0.1", base: int = 50_000) -> tuple[PortBinding, PortBinding]:
    """Loopback endpoints labelled with the testbed's vehicle/server addresses."""
    vehicle = PortBinding(Side.VEHICLE, (host, base + 520), (host, base + 521), 0, "192.168.5.20")
    server = PortBinding(Side.SERVER, (host, base + 320), (host, base + 321), server_node, "192.168.3.20")
    return vehicle, server
