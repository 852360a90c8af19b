import random
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vanet_hil.kernel import Kernel, KernelMode, SchedulingInPast, WrongMode, seconds


def test_dispatch_in_time_order():
    k = Kernel()
    k.run_until(seconds(3))
    seen = []
    k.schedule(seconds(5), seen.append, payload="5s")
    k.schedule(seconds(4), seen.append, payload="4s")
    k.run_until(seconds(10))
    assert seen == ["4s", "5s"]


def test_ties_are_fifo():
    k = Kernel()
    seen = []
    k.schedule(seconds(4), seen.append, payload="A")
    k.schedule(seconds(4), seen.append, payload="B")
    k.run_until(seconds(4))
    assert seen == ["A", "B"]


def test_schedule_in_past_rejected():
    k = Kernel()
    k.run_until(seconds(3))
    with pytest.raises(SchedulingInPast):
        k.schedule(seconds(2), lambda _: None)


def test_empty_run_sets_clock():
    k = Kernel()
    stats = k.run_until(seconds(250))
    assert stats.events == 0
    assert stats.final_clock == k.now == seconds(250)


def test_boundary_inclusive():
    k = Kernel()
    for s in (1, 2, 3):
        k.schedule(seconds(s), lambda _: None)
    assert k.run_until(seconds(2)).events == 2
    assert k.now == seconds(2)


def test_cancel_and_recancel():
    k = Kernel()
    seen = []
    ev = k.schedule(10, seen.append, payload="x")
    ev.cancel()
    ev.cancel()
    k.run_until(20)
    assert seen == []
    done = k.schedule(30, seen.append, payload="y")
    k.run_until(40)
    done.cancel()
    assert seen == ["y"] and not done.cancelled


def test_registered_handler():
    k = Kernel()
    got = []
    k.register("node", got.append)
    k.schedule(5, target="node", payload=1)
    k.run_until(5)
    assert got == [1]


def _random_trace(seed: int) -> list:
    rng = random.Random(seed)
    k = Kernel(trace=True)

    def handler(depth):
        if depth < 4:
            for _ in range(rng.randint(0, 3)):
                k.schedule_in(rng.randint(0, 50), handler, f"n{rng.randint(0, 3)}", depth + 1)

    for _ in range(20):
        k.schedule(rng.randint(0, 100), handler, "root", 0)
    k.run_until(10_000)
    return k.trace


def test_identical_reruns_give_identical_traces():
    assert _random_trace(7) == _random_trace(7)
    assert _random_trace(7) != _random_trace(8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=1000), min_size=1, max_size=200))
def test_total_order_and_monotone_clock(times):
    k = Kernel(trace=True)
    clocks = []
    for t in times:
        k.schedule(t, lambda _: clocks.append(k.now))
    k.run_until(1000)
    keys = [(t, s) for t, s, _ in k.trace]
    assert keys == sorted(keys)
    assert clocks == sorted(clocks)
    assert len(keys) == len(times)


def test_mode_guards():
    with pytest.raises(WrongMode):
        Kernel(KernelMode.real_time()).run_until(10)
    with pytest.raises(WrongMode):
        Kernel().run_realtime(10)


@pytest.mark.realtime
def test_realtime_empty_run_wall_duration():
    k = Kernel(KernelMode.real_time(5_000))
    t0 = time.perf_counter()
    stats = k.run_realtime(seconds(1.0))
    wall = time.perf_counter() - t0
    assert 1.0 <= wall <= 1.0 + 0.005
    assert stats.final_clock == seconds(1.0)


@pytest.mark.realtime
def test_realtime_event_drift_within_budget():
    k = Kernel(KernelMode.real_time(5_000))
    k.schedule(seconds(0.5), lambda _: None)
    stats = k.run_realtime(seconds(0.8))
    assert stats.events == 1
    assert 0 <= stats.max_drift_us <= 5_000
    assert stats.overloads == 0


@pytest.mark.realtime
def test_realtime_injection_stamped_with_wall_time():
    k = Kernel(KernelMode.real_time(5_000))
    stamps = []

    def inject():
        time.sleep(0.3)
        k.inject(lambda _: stamps.append(k.now))

    threading.Thread(target=inject).start()
    k.run_realtime(seconds(0.6))
    assert len(stamps) == 1
    assert abs(stamps[0] - seconds(0.3)) <= 5_000


@pytest.mark.realtime
def test_injection_never_precedes_last_dispatch():
    k = Kernel(KernelMode.real_time(5_000))
    order = []
    k.schedule(seconds(0.1), lambda _: order.append(("event", k.now)))

    def inject():
        time.sleep(0.15)
        k.inject(lambda _: order.append(("inject", k.now)))

    threading.Thread(target=inject).start()
    k.run_realtime(seconds(0.3))
    assert [o[0] for o in order] == ["event", "inject"]
    assert order[1][1] >= order[0][1]


@pytest.mark.realtime
def test_overload_is_counted_not_raised():
    k = Kernel(KernelMode.real_time(1_000))
    k.schedule(seconds(0.05), lambda _: time.sleep(0.03))
    k.schedule(seconds(0.06), lambda _: None)
    stats = k.run_realtime(seconds(0.1))
    assert stats.overloads == 1
    assert stats.max_drift_us > 1_000
