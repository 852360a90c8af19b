"""Event-driven shared wireless medium with per-node DCF.

Every vehicle owns one FIFO queue (EDCA disabled). A node counts down its
backoff only while it senses the medium idle, freezes the residual slots when
an in-range transmission starts and resumes one DIFS after the medium clears.
A data frame and its ACK exchange occupy the medium as one interval; the
sender learns the outcome at the end of that interval.
"""

from __future__ import annotations

import enum
import random
from collections import deque
from typing import Callable, Sequence

from .kernel import Kernel, SimEvent
from .mobility import VehicleState
from .radio import (
    DcfState,
    Frame,
    MacConfig,
    Outcome,
    RadioConfig,
    Transmission,
    airtime,
    draw_backoff,
    in_range,
    resolve_medium,
)

SERVER_POSITION = (150.0, 50.0)


class Fate(enum.Enum):
    DELIVERED = "delivered"
    COLLIDED = "collided"
    DROPPED = "dropped"
    INFLIGHT = "inflight"


class _Node:
    __slots__ = ("node_id", "queue", "dcf", "busy", "idle_since", "countdown_start",
                 "backoff_event", "contending", "tx", "rng")

    def __init__(self, node_id: int, mac: MacConfig, rng: random.Random):
        self.node_id = node_id
        self.queue: deque[Frame] = deque()
        self.dcf = DcfState.from_config(mac)
        self.busy = 0
        self.idle_since = 0
        self.countdown_start = 0
        self.backoff_event: SimEvent | None = None
        self.contending = False
        self.tx: Transmission | None = None
        self.rng = rng


class Network:
    """Vehicles ``0..n-1`` plus a static edge-server node with id ``n``.

    ``on_fate(frame, fate, time_us)`` is called exactly once per enqueued frame
    that reaches a final state during the run. With ``ideal_delay_us`` set the
    MAC is bypassed and every frame is delivered after that fixed delay.
    """

    def __init__(self, kernel: Kernel, fleet: Sequence[VehicleState],
                 radio: RadioConfig = RadioConfig(), mac: MacConfig = MacConfig(),
                 seed: int = 0, server_position: tuple[float, float] = SERVER_POSITION,
                 ideal_delay_us: int | None = None):
        self.kernel = kernel
        self.radio = radio
        self.mac = mac
        self.ideal_delay_us = ideal_delay_us
        self.server_id = len(fleet)
        self.positions: list[tuple[float, float]] = [v.position for v in fleet] + [server_position]
        self.nodes = [_Node(i, mac, random.Random(seed * 7919 + i)) for i in range(len(self.positions))]
        self.ongoing: list[Transmission] = []
        self.on_fate: Callable[[Frame, Fate, int], None] | None = None
        self.collisions = 0
        self.transmissions = 0
        self._ack_us = mac.sifs_us + airtime(mac.ack_bytes, mac.ack_rate, mac.phy_overhead_us)

    def update_positions(self, fleet: Sequence[VehicleState]) -> None:
        for v in fleet:
            self.positions[v.node_id] = v.position

    def queue_length(self, node_id: int) -> int:
        return len(self.nodes[node_id].queue)

    def queued_frames(self) -> list[Frame]:
        return [f for n in self.nodes for f in n.queue]

    def _fate(self, frame: Frame, fate: Fate, t: int) -> None:
        if self.on_fate is not None:
            self.on_fate(frame, fate, t)

    # -- ingress --------------------------------------------------------

    def enqueue(self, frame: Frame) -> bool:
        """Hand a frame to its source node's MAC. Returns False on queue overflow."""
        if self.ideal_delay_us is not None:
            self.kernel.schedule_in(self.ideal_delay_us, self._ideal_deliver, "ideal", frame)
            return True
        node = self.nodes[frame.src]
        if len(node.queue) >= self.mac.queue_limit:
            self._fate(frame, Fate.DROPPED, self.kernel.now)
            return False
        node.queue.append(frame)
        if node.tx is None and not node.contending:
            self._contend(node)
        return True

    def _ideal_deliver(self, frame: Frame) -> None:
        self._fate(frame, Fate.DELIVERED, self.kernel.now)

    # -- DCF ------------------------------------------------------------

    def _contend(self, node: _Node) -> None:
        draw_backoff(node.dcf, node.rng)
        node.contending = True
        if node.busy == 0:
            self._schedule_countdown(node)

    def _schedule_countdown(self, node: _Node) -> None:
        now = self.kernel.now
        slot = self.mac.slot_us
        base = node.idle_since + self.mac.difs_us
        if now <= base:
            start = base
        else:
            # stay on the slot grid of the current idle period
            start = base + -(-(now - base) // slot) * slot
        node.countdown_start = start
        fire = start + node.dcf.backoff_counter * slot
        node.backoff_event = self.kernel.schedule(fire, self._backoff_done, "backoff", node)

    def _medium_busy(self, node: _Node, t: int) -> None:
        ev = node.backoff_event
        if ev is None or ev.fire_time <= t:
            # a countdown ending in this very slot still transmits
            return
        ev.cancel()
        node.backoff_event = None
        if t > node.countdown_start:
            elapsed = (t - node.countdown_start) // self.mac.slot_us
            node.dcf.backoff_counter -= elapsed

    def _medium_idle(self, node: _Node, t: int) -> None:
        node.idle_since = t
        if node.contending and node.backoff_event is None and node.tx is None:
            self._schedule_countdown(node)

    def _backoff_done(self, node: _Node) -> None:
        node.backoff_event = None
        node.contending = False
        node.dcf.backoff_counter = 0
        self._start_tx(node)

    def _start_tx(self, node: _Node) -> None:
        frame = node.queue[0]
        now = self.kernel.now
        mac = self.mac
        data_us = airtime(frame.payload_len + mac.mac_header_bytes,
                          self.radio.rate_for(frame.kind), mac.phy_overhead_us)
        pos = self.positions[node.node_id]
        tx = Transmission(node.node_id, frame, now, now + data_us + self._ack_us, pos, data_end=now + data_us)
        positions = self.positions
        cfg = self.radio
        tx.hearers = [n for n in self.nodes
                      if n is not node and in_range(pos, positions[n.node_id], cfg)]
        for other in self.ongoing:
            other.overlaps.append(tx)
            tx.overlaps.append(other)
        self.ongoing.append(tx)
        node.tx = tx
        self.transmissions += 1
        for n in tx.hearers:
            n.busy += 1
            if n.busy == 1:
                self._medium_busy(n, now)
        self.kernel.schedule(tx.end, self._end_tx, "tx_end", tx)

    def _end_tx(self, tx: Transmission) -> None:
        now = self.kernel.now
        self.ongoing.remove(tx)
        for n in tx.hearers:
            n.busy -= 1
            if n.busy == 0:
                self._medium_idle(n, now)
        node = self.nodes[tx.src]
        node.tx = None
        frame = tx.frame
        dst = frame.dst
        group = [tx] + tx.overlaps
        outcome = resolve_medium(group, {dst: self.positions[dst]}, self.radio)[dst][0][1]
        dcf = node.dcf
        if outcome is Outcome.RECEIVED:
            dcf.on_success()
            node.queue.popleft()
            self._fate(frame, Fate.DELIVERED, tx.data_end)
        else:
            self.collisions += 1
            dcf.on_failure()
            if dcf.retry_count > self.mac.retry_limit:
                dcf.on_success()
                node.queue.popleft()
                self._fate(frame, Fate.COLLIDED, now)
        # drop references so finished transmissions can be collected
        tx.overlaps = []
        if node.busy == 0:
            node.idle_since = now
        if node.queue:
            self._contend(node)
