"""Cooperative runtime: effects, channels, events, virtual and real clocks."""

from __future__ import annotations

import time
from typing import Generator

import pytest

from asyncrl.runtime import (
    CANCELLED,
    CLOSED,
    TIMEOUT,
    Channel,
    ChannelClosedError,
    ChannelFullError,
    DeadlockError,
    Get,
    LivelockError,
    OneShot,
    Put,
    Scheduler,
    Sleep,
    StopFlag,
    Wait,
    drain,
)


# -- clock ------------------------------------------------------------------


def test_virtual_clock_advances_to_event_times() -> None:
    sched = Scheduler()
    times: list[float] = []

    def sleeper(delay: float) -> Generator:
        yield Sleep(delay)
        times.append(sched.now)

    sched.spawn("a", sleeper(0.5))
    sched.spawn("b", sleeper(0.125))
    sched.run()
    assert times == [0.125, 0.5]
    assert sched.now == 0.5


def test_virtual_run_is_instant_in_wall_time() -> None:
    sched = Scheduler()

    def long_sleep() -> Generator:
        yield Sleep(3600.0)

    sched.spawn("nap", long_sleep())
    t0 = time.monotonic()
    sched.run()
    assert time.monotonic() - t0 < 0.5
    assert sched.now == 3600.0


def test_same_instant_events_run_in_spawn_order() -> None:
    sched = Scheduler()
    order: list[str] = []

    def tagged(name: str) -> Generator:
        order.append(name)
        yield Sleep(0.0)
        order.append(name + "'")

    for name in ("x", "y", "z"):
        sched.spawn(name, tagged(name))
    sched.run()
    assert order == ["x", "y", "z", "x'", "y'", "z'"]
    assert sched.now == 0.0


def test_negative_sleep_rejected() -> None:
    sched = Scheduler()

    def bad() -> Generator:
        yield Sleep(-1.0)

    sched.spawn("bad", bad())
    with pytest.raises(ValueError, match="negative sleep"):
        sched.run()


def test_non_effect_yield_rejected() -> None:
    sched = Scheduler()

    def bad() -> Generator:
        yield "not an effect"

    sched.spawn("bad", bad())
    with pytest.raises(TypeError, match="non-effect"):
        sched.run()


def test_run_until_stops_the_clock() -> None:
    sched = Scheduler()
    woke: list[float] = []

    def sleeper() -> Generator:
        yield Sleep(10.0)
        woke.append(sched.now)

    sched.spawn("s", sleeper())
    sched.run(until=2.0)
    assert woke == []
    assert sched.now == 2.0
    assert len(sched.alive_tasks()) == 1
    sched.run()
    assert woke == [10.0]


def test_real_clock_sleep_elapses_wall_time() -> None:
    sched = Scheduler(real_time=True)

    def nap() -> Generator:
        yield Sleep(0.05)

    sched.spawn("nap", nap())
    t0 = time.monotonic()
    sched.run()
    elapsed = time.monotonic() - t0
    assert elapsed >= 0.045


# -- tasks and completion events ---------------------------------------------


def test_task_return_value_flows_through_wait() -> None:
    sched = Scheduler()
    got: list[int] = []

    def producer() -> Generator:
        yield Sleep(0.01)
        return 42

    def consumer(done: OneShot) -> Generator:
        value = yield Wait(done)
        got.append(value)

    t = sched.spawn("producer", producer())
    sched.spawn("consumer", consumer(t.done))
    sched.run()
    assert got == [42]
    assert t.done.value == 42
    assert not t.alive


def test_uncaught_task_exception_aborts_the_run() -> None:
    sched = Scheduler()

    def boom() -> Generator:
        yield Sleep(0.0)
        raise RuntimeError("component panic")

    t = sched.spawn("boom", boom())
    with pytest.raises(RuntimeError, match="component panic"):
        sched.run()
    assert not t.alive
    assert t.done.value is CANCELLED


def test_shutdown_cancels_live_tasks_and_runs_finally() -> None:
    sched = Scheduler()
    cleaned: list[str] = []

    def guarded() -> Generator:
        try:
            yield Sleep(100.0)
        finally:
            cleaned.append("finally")

    t = sched.spawn("guarded", guarded())
    sched.run(until=1.0)
    sched.shutdown()
    assert cleaned == ["finally"]
    assert not t.alive
    assert t.done.value is CANCELLED
    assert sched.alive_tasks() == []


# -- oneshot events ------------------------------------------------------------


def test_oneshot_set_twice_rejected() -> None:
    ev = OneShot("e")
    ev.set(1)
    with pytest.raises(ValueError, match="set twice"):
        ev.set(2)


def test_oneshot_value_before_set_rejected() -> None:
    ev = OneShot("e")
    with pytest.raises(ValueError, match="before set"):
        _ = ev.value


def test_wait_on_already_set_event_returns_immediately() -> None:
    sched = Scheduler()
    ev = OneShot("e")
    ev.set("ready")
    got: list[str] = []

    def waiter() -> Generator:
        got.append((yield Wait(ev)))

    sched.spawn("w", waiter())
    sched.run()
    assert got == ["ready"]


def test_wait_timeout_returns_sentinel() -> None:
    sched = Scheduler()
    ev = OneShot("never")
    got: list[object] = []

    def waiter() -> Generator:
        got.append((yield Wait(ev, timeout=0.5)))

    sched.spawn("w", waiter())
    sched.run()
    assert got == [TIMEOUT]
    assert sched.now == 0.5


def test_wait_resolved_before_timeout_gets_the_value() -> None:
    sched = Scheduler()
    ev = OneShot("e")
    got: list[object] = []

    def setter() -> Generator:
        yield Sleep(0.1)
        ev.set(7)

    def waiter() -> Generator:
        got.append((yield Wait(ev, timeout=10.0)))

    sched.spawn("s", setter())
    sched.spawn("w", waiter())
    sched.run()
    assert got == [7]
    # the stale timer must not hold the clock hostage
    assert sched.now == pytest.approx(0.1)


# -- channels -----------------------------------------------------------------


def test_channel_fifo_order() -> None:
    ch = Channel("c")
    received: list[int] = []

    def producer() -> Generator:
        for i in range(5):
            yield Put(ch, i)

    def consumer() -> Generator:
        for _ in range(5):
            received.append((yield Get(ch)))

    sched = Scheduler()
    sched.spawn("p", producer())
    sched.spawn("c", consumer())
    sched.run()
    assert received == [0, 1, 2, 3, 4]


def test_get_blocks_until_put() -> None:
    ch = Channel("c")
    sched = Scheduler()
    got: list[object] = []

    def consumer() -> Generator:
        got.append((yield Get(ch)))

    def producer() -> Generator:
        yield Sleep(1.0)
        yield Put(ch, "late")

    sched.spawn("c", consumer())
    sched.spawn("p", producer())
    sched.run()
    assert got == ["late"]
    assert sched.now == 1.0


def test_get_timeout_sentinel() -> None:
    ch = Channel("c")
    sched = Scheduler()
    got: list[object] = []

    def consumer() -> Generator:
        got.append((yield Get(ch, timeout=0.25)))

    sched.spawn("c", consumer())
    sched.run()
    assert got == [TIMEOUT]


def test_bounded_channel_backpressure() -> None:
    ch = Channel("c", capacity=1)
    sched = Scheduler()
    events: list[str] = []

    def producer() -> Generator:
        yield Put(ch, 1)
        events.append(f"put1@{sched.now}")
        yield Put(ch, 2)
        events.append(f"put2@{sched.now}")

    def consumer() -> Generator:
        yield Sleep(1.0)
        item = yield Get(ch)
        events.append(f"got{item}@{sched.now}")
        item = yield Get(ch)
        events.append(f"got{item}@{sched.now}")

    sched.spawn("p", producer())
    sched.spawn("c", consumer())
    sched.run()
    # the second put cannot land before the consumer frees a slot at t=1
    # (the freed putter resumes before the getter at the same instant)
    assert events == ["put1@0.0", "put2@1.0", "got1@1.0", "got2@1.0"]


def test_close_wakes_getters_with_closed() -> None:
    ch = Channel("c")
    sched = Scheduler()
    got: list[object] = []

    def consumer() -> Generator:
        got.append((yield Get(ch)))

    def closer() -> Generator:
        yield Sleep(0.5)
        ch.close()

    sched.spawn("c", consumer())
    sched.spawn("k", closer())
    sched.run()
    assert got == [CLOSED]


def test_close_wakes_blocked_putters_with_closed() -> None:
    ch = Channel("c", capacity=1)
    sched = Scheduler()
    results: list[object] = []

    def producer() -> Generator:
        yield Put(ch, 1)
        results.append((yield Put(ch, 2)))  # blocks at capacity

    def closer() -> Generator:
        yield Sleep(0.5)
        ch.close()

    sched.spawn("p", producer())
    sched.spawn("k", closer())
    sched.run()
    assert results == [CLOSED]


def test_get_drains_queued_items_after_close() -> None:
    ch = Channel("c")
    ch.put_nowait("x")
    ch.close()
    sched = Scheduler()
    got: list[object] = []

    def consumer() -> Generator:
        got.append((yield Get(ch)))
        got.append((yield Get(ch)))

    sched.spawn("c", consumer())
    sched.run()
    assert got == ["x", CLOSED]


def test_put_on_closed_channel_raises_into_task() -> None:
    ch = Channel("c")
    ch.close()
    sched = Scheduler()
    caught: list[str] = []

    def producer() -> Generator:
        try:
            yield Put(ch, 1)
        except ChannelClosedError as exc:
            caught.append(str(exc))

    sched.spawn("p", producer())
    sched.run()
    assert len(caught) == 1


def test_put_nowait_and_get_nowait() -> None:
    ch = Channel("c", capacity=2)
    ch.put_nowait(1)
    ch.put_nowait(2)
    with pytest.raises(ChannelFullError):
        ch.put_nowait(3)
    assert ch.get_nowait() == 1
    assert len(ch) == 1
    assert drain(ch) == [2]
    with pytest.raises(IndexError):
        ch.get_nowait()


def test_zero_capacity_channel_rejected() -> None:
    with pytest.raises(ValueError):
        Channel("c", capacity=0)


# -- failure detection ----------------------------------------------------------


def test_deadlock_detected_and_named() -> None:
    sched = Scheduler()
    ev = OneShot("never")

    def waiter() -> Generator:
        yield Wait(ev)

    sched.spawn("stuck-task", waiter())
    with pytest.raises(DeadlockError, match="stuck-task"):
        sched.run()


def test_livelock_guard_trips_on_zero_time_spin() -> None:
    sched = Scheduler(livelock_limit=500)

    def spinner() -> Generator:
        while True:
            yield Sleep(0.0)

    sched.spawn("spin", spinner())
    with pytest.raises(LivelockError):
        sched.run()


def test_stop_flag_latches() -> None:
    flag = StopFlag()
    assert not flag.is_set
    flag.set()
    flag.set()
    assert flag.is_set


# -- determinism -----------------------------------------------------------------


def test_identical_programs_produce_identical_traces() -> None:
    def trace_once() -> list[tuple[str, float]]:
        sched = Scheduler()
        log: list[tuple[str, float]] = []
        ch = Channel("c", capacity=2)

        def producer() -> Generator:
            for i in range(4):
                yield Sleep(0.01 * i)
                yield Put(ch, i)
                log.append((f"put{i}", sched.now))

        def consumer() -> Generator:
            for _ in range(4):
                item = yield Get(ch)
                yield Sleep(0.005)
                log.append((f"got{item}", sched.now))

        sched.spawn("p", producer())
        sched.spawn("c", consumer())
        sched.run()
        return log

    assert trace_once() == trace_once()
