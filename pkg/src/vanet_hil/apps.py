"""Real-world endpoints that talk to the gateway: an iperf-like UDP probe pair
and a LiDAR capture sender.

Probe payloads start with ``stream_id:u32, seq:u32, gen_wall_us:u64``
(big-endian) and are zero-padded to the requested size.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

from .gateway import MAX_DATAGRAM, Envelope, EnvelopeKind, GatewayError, decode, wall_us
from .traffic import StreamRecord, account
from .network import Fate

PROBE_HEADER = struct.Struct(">IIQ")


def probe_payload(stream_id: int, seq: int, gen_us: int, size: int) -> bytes:
    head = PROBE_HEADER.pack(stream_id, seq, gen_us)
    return head + bytes(max(size - len(head), 0))


def probe_client(target: tuple[str, int], rate: float, size: int, duration: float,
                 stream_id: int = 1) -> int:
    """Send ToSim probe datagrams at ``rate`` bit/s for ``duration`` s. Returns datagrams sent."""
    gap = size * 8 / rate
    count = int(duration / gap)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    start = time.perf_counter()
    try:
        for seq in range(count):
            due = start + seq * gap
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            env = Envelope(EnvelopeKind.TO_SIM, wall_us(), probe_payload(stream_id, seq, wall_us(), size))
            sock.sendto(env.encode(), target)
    finally:
        sock.close()
    return count


@dataclass
class ProbeServer:
    """Receives FromSim envelopes and keeps a per-packet log keyed by probe stream."""

    bind: tuple[str, int]
    records: dict[int, StreamRecord] = field(default_factory=dict)
    bad: int = 0

    def __post_init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(self.bind)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def handle(self, data: bytes, arrival_us: int) -> None:
        try:
            env = decode(data)
        except GatewayError:
            self.bad += 1
            return
        if env.kind is not EnvelopeKind.FROM_SIM or len(env.payload) < PROBE_HEADER.size:
            self.bad += 1
            return
        sid, seq, gen = PROBE_HEADER.unpack_from(env.payload)
        rec = self.records.setdefault(sid, StreamRecord(f"probe{sid}"))
        # senders are not known to the server; log arrivals in order
        idx = rec.sent(gen, len(env.payload), seq)
        rec.resolve(idx, Fate.DELIVERED, max(arrival_us, gen))

    def serve(self, duration: float, interval: float = 1.0, report=print) -> None:
        """Receive for ``duration`` seconds, printing one KPI line per ``interval``."""
        self.sock.settimeout(0.05)
        start = time.monotonic()
        start_us = wall_us()
        next_report = interval
        while (elapsed := time.monotonic() - start) < duration:
            try:
                data = self.sock.recv(MAX_DATAGRAM + 1)
            except socket.timeout:
                data = None
            if data is not None:
                self.handle(data, wall_us())
            if elapsed >= next_report:
                lo = start_us + int((next_report - interval) * 1e6)
                hi = start_us + int(next_report * 1e6)
                s = account(list(self.records.values()), (lo, hi)) if self.records else None
                if s is not None and report is not None:
                    delay = "-" if s.mean_delay is None else f"{s.mean_delay * 1e3:.3f} ms"
                    report(f"[{next_report - interval:6.1f}-{next_report:6.1f} s] "
                           f"{s.throughput / 1e6:8.3f} Mbit/s  delay {delay}  packets {s.packets}")
                next_report += interval

    def close(self) -> None:
        self.sock.close()


def send_scans(scans: Sequence[bytes], target: tuple[str, int], rate_hz: float) -> int:
    """Send each LiDAR scan as one ToSim datagram at a fixed rate."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    start = time.perf_counter()
    try:
        for k, scan in enumerate(scans):
            delay = start + k / rate_hz - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            sock.sendto(Envelope(EnvelopeKind.TO_SIM, wall_us(), scan).encode(), target)
    finally:
        sock.close()
    return len(scans)
