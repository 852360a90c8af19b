"""Unit-disk propagation, airtime arithmetic and DCF contention primitives."""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

BROADCAST = -1


class Kind(enum.Enum):
    PROBE = "probe"
    LIDAR = "lidar"
    VIDEO = "video"
    BACKGROUND = "background"


@dataclass(slots=True)
class Frame:
    src: int
    dst: int
    payload_len: int
    gen_time: int
    kind: Kind
    stream_id: str
    seq_in_stream: int
    # application unit (scan, chunk, datagram) this frame is a fragment of
    unit: int = 0
    frag: int = 0
    n_frags: int = 1
    payload: bytes | None = None

    def __post_init__(self):
        if self.payload_len < 1:
            raise ValueError("payload_len must be >= 1")


@dataclass(frozen=True)
class RadioConfig:
    coverage_range: float = 200.0
    # carried as metadata only; reception is decided by range
    tx_power_mw: float = 200.0
    frequency_hz: float = 5.9e9
    channel_bandwidth_hz: float = 20e6
    data_rate_best_effort: float = 28e6
    data_rate_low: float = 1.37e6

    def __post_init__(self):
        if self.coverage_range <= 0 or self.data_rate_best_effort <= 0 or self.data_rate_low <= 0:
            raise ValueError("range and rates must be positive")

    def rate_for(self, kind: Kind) -> float:
        return self.data_rate_low if kind is Kind.BACKGROUND else self.data_rate_best_effort


@dataclass(frozen=True)
class MacConfig:
    slot_us: int = 13
    sifs_us: int = 32
    cw_min: int = 15
    cw_max: int = 1023
    retry_limit: int = 7
    queue_limit: int = 100
    mac_header_bytes: int = 34
    phy_overhead_us: int = 20
    ack_bytes: int = 14
    ack_rate: float = 6e6
    mtu: int = 2304

    @property
    def difs_us(self) -> int:
        return self.sifs_us + 2 * self.slot_us


def in_range(a: Sequence[float], b: Sequence[float], cfg: RadioConfig = RadioConfig()) -> bool:
    """Unit-disk reception, boundary inclusive."""
    return math.hypot(a[0] - b[0], a[1] - b[1]) <= cfg.coverage_range


def airtime(payload_len: int, rate: float, overhead_us: int = 0) -> int:
    """Transmission time in whole microseconds, rounded up."""
    if payload_len < 1 or rate <= 0:
        raise ValueError("payload_len >= 1 and rate > 0 required")
    return math.ceil(payload_len * 8 / rate * 1e6) + overhead_us


@dataclass
class DcfState:
    cw_min: int = 15
    cw_max: int = 1023
    current_cw: int = 15
    backoff_counter: int = 0
    retry_count: int = 0
    slot_time: int = 13
    sifs: int = 32
    difs: int = 58

    @classmethod
    def from_config(cls, mac: MacConfig) -> DcfState:
        return cls(mac.cw_min, mac.cw_max, mac.cw_min, 0, 0, mac.slot_us, mac.sifs_us, mac.difs_us)

    def on_failure(self) -> None:
        self.retry_count += 1
        self.current_cw = min(2 * (self.current_cw + 1) - 1, self.cw_max)

    def on_success(self) -> None:
        self.retry_count = 0
        self.current_cw = self.cw_min


def draw_backoff(dcf: DcfState, rng: random.Random) -> int:
    """Draw a uniform slot count in ``[0, current_cw]`` and store it on ``dcf``."""
    dcf.backoff_counter = rng.randint(0, dcf.current_cw) if dcf.current_cw else 0
    return dcf.backoff_counter


class Outcome(enum.Enum):
    RECEIVED = "received"
    COLLIDED = "collided"
    OUT_OF_RANGE = "out_of_range"


@dataclass(eq=False)
class Transmission:
    src: int
    frame: Frame | None
    start: int
    end: int
    position: tuple[float, float]
    # set by the network model; not used by resolve_medium
    data_end: int = 0
    hearers: list = field(default_factory=list)
    overlaps: list = field(default_factory=list)


def _overlap(a: Transmission, b: Transmission) -> bool:
    return a.start < b.end and b.start < a.end


def resolve_medium(transmissions: Sequence[Transmission],
                   receivers: dict[int, Sequence[float]],
                   cfg: RadioConfig = RadioConfig()) -> dict[int, list[tuple[Transmission, Outcome]]]:
    """Decide the fate of every transmission at every receiver.

    A transmission heard by a receiver is Collided there if any other
    transmission the receiver can also hear overlaps it in time. No capture.
    """
    result: dict[int, list[tuple[Transmission, Outcome]]] = {}
    for rid, rpos in receivers.items():
        heard = [t for t in transmissions if t.src != rid and in_range(t.position, rpos, cfg)]
        outcomes = []
        for t in transmissions:
            if t.src == rid or t not in heard:
                outcomes.append((t, Outcome.OUT_OF_RANGE))
            elif any(o is not t and _overlap(t, o) for o in heard):
                outcomes.append((t, Outcome.COLLIDED))
            else:
                outcomes.append((t, Outcome.RECEIVED))
        result[rid] = outcomes
    return result


@dataclass
class ContentionStats:
    rounds: int
    collisions: int
    successes: list[int]
    final_cw: list[int]

    @property
    def collision_rate(self) -> float:
        return self.collisions / self.rounds


def saturated_contention(n_nodes: int, rounds: int, rng: random.Random,
                         mac: MacConfig = MacConfig(), escalate: bool = True) -> ContentionStats:
    """Slot-level DCF among always-backlogged nodes sharing one collision domain.

    Each round the smallest residual counters win; ties collide. Losers keep
    their residual slots. With ``escalate=False`` the window never grows.
    """
    nodes = [DcfState.from_config(mac) for _ in range(n_nodes)]
    for d in nodes:
        draw_backoff(d, rng)
    collisions = 0
    successes = [0] * n_nodes
    for _ in range(rounds):
        low = min(d.backoff_counter for d in nodes)
        winners = [i for i, d in enumerate(nodes) if d.backoff_counter == low]
        for d in nodes:
            d.backoff_counter -= low
        if len(winners) > 1:
            collisions += 1
            for i in winners:
                d = nodes[i]
                if escalate:
                    d.on_failure()
                    if d.retry_count > mac.retry_limit:
                        d.on_success()  # frame dropped, window resets
                draw_backoff(d, rng)
        else:
            i = winners[0]
            successes[i] += 1
            nodes[i].on_success()
            draw_backoff(nodes[i], rng)
    return ContentionStats(rounds, collisions, successes, [d.current_cw for d in nodes])

