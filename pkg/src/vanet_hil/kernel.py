"""Discrete-event kernel with a virtual clock and an optional real-time pacing mode.

Time is kept as integer microseconds. Events are ordered by ``(fire_time, seq)``
so ties dispatch in insertion order. In real-time mode the kernel sleeps until
the wall clock catches up with the next event and, while waiting, admits
events injected from other threads (the gateway port readers).
"""

from __future__ import annotations

import heapq
import queue
import sys
import time
from dataclasses import dataclass
from typing import Any, Callable

US_PER_S = 1_000_000
DEFAULT_DRIFT_BUDGET_US = 5_000

# remaining waits shorter than this are spun instead of slept; timed sleeps
# can overshoot by several ms on small virtual machines
_SPIN_US = 10_000
# port reader threads must not hold the GIL for a default 5 ms slice
_RT_SWITCH_INTERVAL = 0.0005


def seconds(value: float) -> int:
    """Convert seconds to integer microseconds."""
    return int(round(value * US_PER_S))


class SchedulingInPast(ValueError):
    pass


class WrongMode(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelMode:
    realtime: bool = False
    drift_budget_us: int = DEFAULT_DRIFT_BUDGET_US

    @classmethod
    def virtual(cls) -> KernelMode:
        return cls(False)

    @classmethod
    def real_time(cls, drift_budget_us: int = DEFAULT_DRIFT_BUDGET_US) -> KernelMode:
        return cls(True, drift_budget_us)


class SimEvent:
    __slots__ = ("fire_time", "seq", "target", "payload", "action", "cancelled", "dispatched")

    def __init__(self, fire_time: int, seq: int, target: str, payload: Any,
                 action: Callable[[Any], None] | None):
        self.fire_time = fire_time
        self.seq = seq
        self.target = target
        self.payload = payload
        self.action = action
        self.cancelled = False
        self.dispatched = False

    def cancel(self) -> None:
        """Cancel the event; a no-op once dispatched or already cancelled."""
        if not self.dispatched:
            self.cancelled = True

    def __repr__(self) -> str:
        return f"SimEvent(t={self.fire_time}, seq={self.seq}, target={self.target!r})"


@dataclass
class RunStats:
    events: int
    final_clock: int
    max_drift_us: int = 0
    overloads: int = 0
    injected: int = 0
    wall_seconds: float = 0.0


@dataclass
class _Injection:
    action: Callable[[Any], None]
    payload: Any
    target: str


class Kernel:
    """Single-threaded event dispatcher.

    Handlers are either passed per event (``action``) or registered per target
    name with :meth:`register`. With ``trace=True`` every dispatch appends
    ``(fire_time, seq, target)`` to :attr:`trace`.
    """

    def __init__(self, mode: KernelMode | None = None, trace: bool = False):
        self.mode = mode or KernelMode.virtual()
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[Any], None]] = {}
        self._injections: queue.SimpleQueue[_Injection] = queue.SimpleQueue()
        self.trace: list[tuple[int, int, str]] | None = [] if trace else None
        self.dispatched = 0

    def register(self, target: str, handler: Callable[[Any], None]) -> None:
        self._handlers[target] = handler

    def schedule(self, fire_time: int, action: Callable[[Any], None] | None = None,
                 target: str = "", payload: Any = None) -> SimEvent:
        if fire_time < self.now:
            raise SchedulingInPast(f"fire_time {fire_time} < clock {self.now}")
        ev = SimEvent(fire_time, self._seq, target, payload, action)
        self._seq += 1
        heapq.heappush(self._heap, (fire_time, ev.seq, ev))
        return ev

    def schedule_in(self, delay: int, action: Callable[[Any], None] | None = None,
                    target: str = "", payload: Any = None) -> SimEvent:
        return self.schedule(self.now + delay, action, target, payload)

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def _peek_time(self) -> int | None:
        heap = self._heap
        while heap and heap[0][2].cancelled:
            heapq.heappop(heap)
        return heap[0][0] if heap else None

    def _dispatch(self, ev: SimEvent) -> None:
        self.now = ev.fire_time
        ev.dispatched = True
        self.dispatched += 1
        if self.trace is not None:
            self.trace.append((ev.fire_time, ev.seq, ev.target))
        action = ev.action if ev.action is not None else self._handlers[ev.target]
        action(ev.payload)

    def run_until(self, t_end: int) -> RunStats:
        """Dispatch every event with ``fire_time <= t_end``; leave the clock at ``t_end``."""
        if self.mode.realtime:
            raise WrongMode("run_until requires Virtual mode; use run_realtime")
        heap = self._heap
        count = 0
        pop = heapq.heappop
        while heap and heap[0][0] <= t_end:
            ev = pop(heap)[2]
            if ev.cancelled:
                continue
            self._dispatch(ev)
            count += 1
        self.now = max(self.now, t_end)
        return RunStats(count, self.now)

    # -- real-time mode -------------------------------------------------

    def inject(self, action: Callable[[Any], None], payload: Any = None, target: str = "inject") -> None:
        """Thread-safe: queue an external event for admission at the current virtual time."""
        self._injections.put(_Injection(action, payload, target))

    def _admit(self, inj: _Injection, elapsed_us: int) -> None:
        # never earlier than the last dispatched event
        stamp = max(self.now, elapsed_us)
        self.schedule(stamp, inj.action, inj.target, inj.payload)

    def run_realtime(self, t_end: int, drift_budget_us: int | None = None) -> RunStats:
        """Pace virtual time to the wall clock until ``t_end``.

        Late dispatches beyond the drift budget are counted as overloads, not raised.
        """
        if not self.mode.realtime:
            raise WrongMode("run_realtime requires RealTime mode")
        budget = self.mode.drift_budget_us if drift_budget_us is None else drift_budget_us
        saved = sys.getswitchinterval()
        sys.setswitchinterval(_RT_SWITCH_INTERVAL)
        try:
            return self._pace(t_end, budget)
        finally:
            sys.setswitchinterval(saved)

    def _pace(self, t_end: int, budget: int) -> RunStats:
        stats = RunStats(0, self.now)
        clock = time.perf_counter_ns
        origin = clock() // 1000 - self.now

        def elapsed() -> int:
            return clock() // 1000 - origin

        injections = self._injections
        while True:
            while True:
                try:
                    inj = injections.get_nowait()
                except queue.Empty:
                    break
                self._admit(inj, elapsed())
                stats.injected += 1

            next_t = self._peek_time()
            target_t = t_end if next_t is None or next_t > t_end else next_t
            remaining = target_t - elapsed()
            if remaining > 0:
                if remaining > _SPIN_US:
                    try:
                        inj = injections.get(timeout=(remaining - _SPIN_US) / US_PER_S)
                    except queue.Empty:
                        pass
                    else:
                        self._admit(inj, elapsed())
                        stats.injected += 1
                else:
                    time.sleep(0)  # spin, but let other threads take the GIL
                continue

            if next_t is None or next_t > t_end:
                break
            ev = heapq.heappop(self._heap)[2]
            drift = elapsed() - ev.fire_time
            if drift > stats.max_drift_us:
                stats.max_drift_us = drift
            if drift > budget:
                stats.overloads += 1
            self._dispatch(ev)
            stats.events += 1

        self.now = max(self.now, t_end)
        stats.final_clock = self.now
        stats.wall_seconds = elapsed() / US_PER_S
        return stats
