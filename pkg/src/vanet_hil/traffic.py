"""Application traffic: CBR probe, LiDAR and video replayers, background load,
and per-packet delay/throughput accounting.

Every source emits application *units* (a probe datagram, a LiDAR scan, a
video chunk). Units larger than the fragment size are split into numbered
fragments; a unit counts as received only when all its fragments arrive.
"""

from __future__ import annotations

import csv
import io
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .kernel import US_PER_S, Kernel
from .network import Fate, Network
from .radio import Kind, Frame

MAX_PACKET = 65_489
PROBE_PACKET_SIZE = 1250
PROBE_RATE = 22e6
LIDAR_FRAGMENT = 1400
VIDEO_CHUNK_INTERVAL = 0.04
BACKGROUND_SIZE = 1000
BACKGROUND_INTERVAL = 0.01

LIDAR_MAGIC = b"LSCN"
VIDEO_MAGIC = b"VCHK"

LOG_COLUMNS = ("stream_id", "seq", "gen_time_us", "arrival_time_us", "bytes", "outcome", "unit", "n_frags")


class MalformedCapture(ValueError):
    pass


class ClockInversion(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    kind: Kind
    target_rate: float  # bit/s
    packet_size: int  # bytes
    duration: float  # seconds
    start_time: float = 0.0

    def __post_init__(self):
        if self.target_rate <= 0:
            raise ValueError("target_rate must be positive")
        if not 1 <= self.packet_size <= MAX_PACKET:
            raise ValueError(f"packet_size must lie in [1, {MAX_PACKET}]")
        if self.duration < 0 or self.start_time < 0:
            raise ValueError("duration and start_time must be non-negative")


@dataclass(frozen=True)
class CbrSchedule:
    start_us: int
    count: int
    packet_size: int
    target_rate: float

    @property
    def gap(self) -> float:
        return self.packet_size * 8 / self.target_rate

    def time_of(self, k: int) -> int:
        # exact integer offsets; no accumulated rounding over long runs
        return self.start_us + (k * self.packet_size * 8 * US_PER_S) // int(round(self.target_rate))

    def times(self) -> Iterator[int]:
        for k in range(self.count):
            yield self.time_of(k)


def cbr_schedule(cfg: StreamConfig) -> CbrSchedule:
    count = math.floor(cfg.duration * cfg.target_rate / (cfg.packet_size * 8) + 1e-9)
    return CbrSchedule(int(round(cfg.start_time * US_PER_S)), count, cfg.packet_size, cfg.target_rate)


# -- capture containers ---------------------------------------------------

def write_lidar_capture(scans: Sequence[bytes], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(LIDAR_MAGIC)
        for scan in scans:
            fh.write(struct.pack(">I", len(scan)))
            fh.write(scan)


def read_lidar_capture(path: str | Path) -> list[bytes]:
    data = Path(path).read_bytes()
    if data[:4] != LIDAR_MAGIC:
        raise MalformedCapture("missing LSCN magic")
    scans, pos = [], 4
    while pos < len(data):
        if pos + 4 > len(data):
            raise MalformedCapture("truncated scan length")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if n == 0 or pos + n > len(data):
            raise MalformedCapture("truncated or empty scan")
        scans.append(data[pos:pos + n])
        pos += n
    return scans


def synthetic_scans(n_scans: int, points: int = 3600, seed: int = 0) -> list[bytes]:
    """Planar scans as little-endian float32 (angle, range) pairs."""
    rng = np.random.default_rng(seed)
    angles = np.linspace(0, 2 * np.pi, points, endpoint=False, dtype=np.float32)
    scans = []
    for _ in range(n_scans):
        ranges = rng.uniform(0.2, 30.0, points).astype(np.float32)
        scans.append(np.column_stack([angles, ranges]).astype("<f4").tobytes())
    return scans


@dataclass(frozen=True)
class VideoChunk:
    timestamp_us: int
    data: bytes


def write_video_chunks(chunks: Sequence[VideoChunk], path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        for c in chunks:
            fh.write(struct.pack(">QI", c.timestamp_us, len(c.data)))
            fh.write(c.data)


def read_video_chunks(path: str | Path) -> list[VideoChunk]:
    data = Path(path).read_bytes()
    if data[:4] != VIDEO_MAGIC:
        raise MalformedCapture("missing VCHK magic")
    chunks, pos, last = [], 4, -1
    while pos < len(data):
        if pos + 12 > len(data):
            raise MalformedCapture("truncated chunk header")
        ts, n = struct.unpack_from(">QI", data, pos)
        pos += 12
        if n == 0 or pos + n > len(data):
            raise MalformedCapture("truncated or empty chunk")
        if ts <= last:
            raise MalformedCapture("chunk timestamps must increase")
        chunks.append(VideoChunk(ts, data[pos:pos + n]))
        last = ts
        pos += n
    return chunks


def synthetic_video(n_chunks: int, mean_bitrate: float = 2e6, interval: float = VIDEO_CHUNK_INTERVAL,
                    seed: int = 0) -> list[VideoChunk]:
    """Chunks with a large key chunk every 25 and smaller deltas between."""
    rng = np.random.default_rng(seed)
    mean_bytes = mean_bitrate * interval / 8
    chunks = []
    for k in range(n_chunks):
        scale = 3.0 if k % 25 == 0 else 0.9
        size = max(1, int(rng.normal(mean_bytes * scale, mean_bytes * 0.1)))
        chunks.append(VideoChunk(int(round(k * interval * US_PER_S)), rng.bytes(size)))
    return chunks


# -- emission schedules ---------------------------------------------------

@dataclass(frozen=True)
class Emission:
    time_us: int
    unit: int
    frag: int
    n_frags: int
    size: int


def fragment_sizes(total: int, fragment: int) -> list[int]:
    n = -(-total // fragment)
    return [fragment] * (n - 1) + [total - fragment * (n - 1)]


def lidar_replay(scans: Sequence[bytes], rate_hz: float, fragment: int = LIDAR_FRAGMENT) -> list[Emission]:
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    out = []
    for k, scan in enumerate(scans):
        t = int(round(k * US_PER_S / rate_hz))
        sizes = fragment_sizes(len(scan), fragment)
        out.extend(Emission(t, k, i, len(sizes), s) for i, s in enumerate(sizes))
    return out


def video_replay(chunks: Sequence[VideoChunk], chunk_interval: float = VIDEO_CHUNK_INTERVAL,
                 fragment: int = LIDAR_FRAGMENT) -> list[Emission]:
    out = []
    for k, chunk in enumerate(chunks):
        t = int(round(k * chunk_interval * US_PER_S))
        sizes = fragment_sizes(len(chunk.data), fragment)
        out.extend(Emission(t, k, i, len(sizes), s) for i, s in enumerate(sizes))
    return out


def playable_duration(delivered_units: set[int], emitted_units: Sequence[int], unit_interval: float) -> float:
    """End time of the last unit in the delivered prefix of the emitted sequence."""
    last = None
    for u in emitted_units:
        if u not in delivered_units:
            break
        last = u
    return 0.0 if last is None else (last + 1) * unit_interval


def video_report(chunks: Sequence[VideoChunk], delivered: set[int],
                 chunk_interval: float = VIDEO_CHUNK_INTERVAL) -> tuple[int, float]:
    """(bytes received over complete chunks, playable duration in seconds)."""
    received = sum(len(c.data) for k, c in enumerate(chunks) if k in delivered)
    return received, playable_duration(delivered, range(len(chunks)), chunk_interval)


@dataclass(frozen=True)
class BackgroundPlan:
    node_id: int
    config: StreamConfig
    jitter_us: int


def background_traffic(n_vehicles: int, cfg: StreamConfig, seed: int = 0) -> list[BackgroundPlan]:
    """Identical CBR load for vehicles 1..n-1; node 0 carries the gateway application."""
    if n_vehicles < 1:
        raise ValueError("n_vehicles must be >= 1")
    rng = random.Random(seed)
    interval_us = int(round(cfg.packet_size * 8 / cfg.target_rate * US_PER_S))
    return [BackgroundPlan(i, cfg, rng.randrange(interval_us)) for i in range(1, n_vehicles)]


# -- accounting -----------------------------------------------------------

@dataclass
class StreamRecord:
    """Per-packet log. Rows are ``[seq, gen_us, arrival_us|None, bytes, outcome, unit, n_frags]``."""

    stream_id: str
    log: list[list] = field(default_factory=list)
    packets_sent: int = 0
    packets_received: int = 0
    bytes_received: int = 0

    def sent(self, gen_us: int, size: int, unit: int = 0, n_frags: int = 1) -> int:
        seq = self.packets_sent
        self.log.append([seq, gen_us, None, size, Fate.INFLIGHT.value, unit, n_frags])
        self.packets_sent += 1
        return seq

    def resolve(self, seq: int, fate: Fate, t_us: int) -> None:
        row = self.log[seq]
        if fate is Fate.DELIVERED:
            if t_us < row[1]:
                raise ClockInversion(f"arrival {t_us} before generation {row[1]}")
            row[2] = t_us
            self.packets_received += 1
            self.bytes_received += row[3]
        row[4] = fate.value

    def lost(self) -> int:
        return sum(1 for r in self.log if r[4] in (Fate.COLLIDED.value, Fate.DROPPED.value))

    def in_flight(self) -> int:
        return sum(1 for r in self.log if r[4] == Fate.INFLIGHT.value)

    def deliveries(self) -> list[list]:
        return [r for r in self.log if r[2] is not None]

    def write_csv(self, fh: io.TextIOBase) -> None:
        w = csv.writer(fh, lineterminator="\n")
        for seq, gen, arr, size, outcome, unit, nf in self.log:
            w.writerow((self.stream_id, seq, gen, "" if arr is None else arr, size, outcome, unit, nf))


@dataclass(frozen=True)
class KpiSample:
    window: tuple[int, int]
    packets: int
    mean_delay: float | None  # seconds; None when nothing arrived
    throughput: float  # bit/s
    delivered_streams: int


def account(records: StreamRecord | Sequence[StreamRecord], window: tuple[int, int]) -> KpiSample:
    """KPIs over deliveries whose arrival falls in ``[start, end)`` (microseconds)."""
    if isinstance(records, StreamRecord):
        records = [records]
    start, end = window
    if end <= start:
        raise ValueError("empty window")
    n = total_delay = total_bytes = streams = 0
    for rec in records:
        hit = False
        for _, gen, arr, size, _, _, _ in rec.log:
            if arr is None or not start <= arr < end:
                continue
            if arr < gen:
                raise ClockInversion(f"arrival {arr} before generation {gen}")
            n += 1
            total_delay += arr - gen
            total_bytes += size
            hit = True
        streams += hit
    mean = total_delay / n / US_PER_S if n else None
    return KpiSample(window, n, mean, 8 * total_bytes * US_PER_S / (end - start), streams)


# -- kernel-driven sources ------------------------------------------------

class UnitSource:
    """Emits a list of fragment emissions for one stream from one node.

    ``multiplier`` thins whole units with a deterministic credit counter: at
    0.5 every other unit is sent. Frames are handed to ``submit``.
    """

    def __init__(self, kernel: Kernel, record: StreamRecord, node_id: int, dst: int, kind: Kind,
                 emissions: Sequence[Emission], submit: Callable[[Frame], object],
                 offset_us: int = 0):
        self.kernel = kernel
        self.record = record
        self.node_id = node_id
        self.dst = dst
        self.kind = kind
        self.emissions = emissions
        self.submit = submit
        self.offset_us = offset_us
        self.multiplier = 1.0
        self.emitted_units: list[int] = []
        self._credit = 0.0
        self._sending_unit = False
        self._i = 0

    def start(self) -> None:
        if self.emissions:
            self.kernel.schedule(self.offset_us + self.emissions[0].time_us, self._fire, self.record.stream_id)

    def _fire(self, _payload=None) -> None:
        em = self.emissions[self._i]
        if em.frag == 0:
            self._credit += self.multiplier
            self._sending_unit = self._credit >= 1.0 - 1e-9
            if self._sending_unit:
                self._credit -= 1.0
                self.emitted_units.append(em.unit)
        if self._sending_unit:
            now = self.kernel.now
            seq = self.record.sent(now, em.size, em.unit, em.n_frags)
            self.submit(Frame(self.node_id, self.dst, em.size, now, self.kind, self.record.stream_id,
                              seq, em.unit, em.frag, em.n_frags))
        self._i += 1
        if self._i < len(self.emissions):
            self.kernel.schedule(self.offset_us + self.emissions[self._i].time_us, self._fire,
                                 self.record.stream_id)


class CbrSource:
    """Constant-bitrate source that schedules one emission at a time."""

    def __init__(self, kernel: Kernel, record: StreamRecord, node_id: int, dst: int,
                 schedule: CbrSchedule, kind: Kind, submit: Callable[[Frame], object],
                 offset_us: int = 0):
        self.kernel = kernel
        self.record = record
        self.node_id = node_id
        self.dst = dst
        self.schedule = schedule
        self.kind = kind
        self.submit = submit
        self.offset_us = offset_us
        self.multiplier = 1.0
        self.emitted_units: list[int] = []
        self._credit = 0.0
        self._k = 0

    def start(self) -> None:
        if self.schedule.count:
            self.kernel.schedule(self.offset_us + self.schedule.time_of(0), self._fire, self.record.stream_id)

    def _fire(self, _payload=None) -> None:
        k = self._k
        self._credit += self.multiplier
        if self._credit >= 1.0 - 1e-9:
            self._credit -= 1.0
            now = self.kernel.now
            size = self.schedule.packet_size
            seq = self.record.sent(now, size, k, 1)
            self.emitted_units.append(k)
            self.submit(Frame(self.node_id, self.dst, size, now, self.kind, self.record.stream_id, seq, k))
        self._k = k + 1
        if self._k < self.schedule.count:
            self.kernel.schedule(self.offset_us + self.schedule.time_of(self._k), self._fire,
                                 self.record.stream_id)


def attach_accounting(network: Network, records: dict[str, StreamRecord],
                      listeners: Sequence[Callable[[Frame, Fate, int], None]] = ()) -> None:
    """Route MAC fates into the owning stream records, then to listeners."""

    def on_fate(frame: Frame, fate: Fate, t: int) -> None:
        rec = records.get(frame.stream_id)
        if rec is not None:
            rec.resolve(frame.seq_in_stream, fate, t)
        for fn in listeners:
            fn(frame, fate, t)

    network.on_fate = on_fate


def complete_units(record: StreamRecord) -> set[int]:
    """Units whose every fragment was delivered."""
    got: dict[int, int] = {}
    need: dict[int, int] = {}
    for _, _, arr, _, _, unit, nf in record.log:
        need[unit] = nf
        if arr is not None:
            got[unit] = got.get(unit, 0) + 1
    return {u for u, n in need.items() if got.get(u, 0) == n}
