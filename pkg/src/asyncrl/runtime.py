"""Cooperative task runtime with interchangeable virtual and real clocks.

Components (rollout workers, batching loops, the prefetcher, the trainer)
are written once as plain generator coroutines that yield effect objects
(Sleep, Get, Put, Wait).  A Scheduler drives them either on a virtual
clock (discrete-event, deterministic, zero wall cost for simulated waits)
or on the wall clock (simulated waits actually elapse).  The algorithmic
code is identical in both modes; only the clock driver differs.

Determinism in virtual mode comes from running exactly one task at a
time and breaking event-time ties by a monotone sequence number.
"""

from __future__ import annotations

import heapq
import itertools
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator


class _Sentinel:
    def __init__(self, name: str) -> None:
        self._name = name

    def __repr__(self) -> str:
        return f"<{self._name}>"


#: Returned from a Get/Wait effect whose timeout expired first.
TIMEOUT = _Sentinel("TIMEOUT")
#: Returned from a Get on a closed, drained channel (or a Put on one that
#: closed while blocked).
CLOSED = _Sentinel("CLOSED")
#: Value stored in Task.done when the task was cancelled at shutdown.
CANCELLED = _Sentinel("CANCELLED")


class SchedulerError(RuntimeError):
    pass


class DeadlockError(SchedulerError):
    """All live tasks are blocked and no timer can ever fire."""


class LivelockError(SchedulerError):
    """Virtual time stopped advancing across a huge number of events."""


class ChannelClosedError(RuntimeError):
    pass


class ChannelFullError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Effects yielded by task generators.


@dataclass(frozen=True)
class Sleep:
    seconds: float


@dataclass(frozen=True)
class Get:
    channel: "Channel"
    timeout: float | None = None


@dataclass(frozen=True)
class Put:
    channel: "Channel"
    item: Any


@dataclass(frozen=True)
class Wait:
    event: "OneShot"
    timeout: float | None = None


class _WaitRecord:
    """One blocked task; `resolved` supports lazy cancellation."""

    __slots__ = ("task", "resolved", "describe")

    def __init__(self, task: "Task", describe: str) -> None:
        self.task = task
        self.resolved = False
        self.describe = describe


class OneShot:
    """Single-assignment event; tasks block on it via Wait."""

    __slots__ = ("_value", "_is_set", "_waiters", "name")

    def __init__(self, name: str = "oneshot") -> None:
        self.name = name
        self._value: Any = None
        self._is_set = False
        self._waiters: list[_WaitRecord] = []

    @property
    def is_set(self) -> bool:
        return self._is_set

    @property
    def value(self) -> Any:
        if not self._is_set:
            raise ValueError(f"{self.name}: value read before set")
        return self._value

    def set(self, value: Any = None) -> None:
        if self._is_set:
            raise ValueError(f"{self.name}: set twice")
        self._is_set = True
        self._value = value
        waiters, self._waiters = self._waiters, []
        for rec in waiters:
            if not rec.resolved:
                rec.resolved = True
                rec.task.scheduler._resume(rec.task, value)


class Channel:
    """FIFO queue connecting tasks; optionally bounded (back-pressure).

    put_nowait is safe to call from plain (non-task) code, including other
    OS threads only insofar as tests push sequentially; the runtime itself
    is single-threaded by design.
    """

    def __init__(self, name: str = "channel", capacity: int | None = None) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError(f"{name}: capacity must be >= 1 or None")
        self.name = name
        self.capacity = capacity
        self._items: deque[Any] = deque()
        self._getters: deque[_WaitRecord] = deque()
        self._putters: deque[tuple[_WaitRecord, Any]] = deque()
        self._closed = False

    def __len__(self) -> int:
        return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    def _pop_live_getter(self) -> _WaitRecord | None:
        while self._getters:
            rec = self._getters.popleft()
            if not rec.resolved:
                return rec
        return None

    def _pop_live_putter(self) -> tuple[_WaitRecord, Any] | None:
        while self._putters:
            rec, item = self._putters.popleft()
            if not rec.resolved:
                return rec, item
        return None

    def get_nowait(self) -> Any:
        """Pop the head item without blocking; raises IndexError if empty."""
        item = self._items.popleft()
        entry = self._pop_live_putter()
        if entry is not None:
            rec, pending = entry
            rec.resolved = True
            self._items.append(pending)
            rec.task.scheduler._resume(rec.task, None)
        return item

    def put_nowait(self, item: Any) -> None:
        if self._closed:
            raise ChannelClosedError(f"{self.name}: put on closed channel")
        getter = self._pop_live_getter()
        if getter is not None:
            getter.resolved = True
            getter.task.scheduler._resume(getter.task, item)
            return
        if self.capacity is not None and len(self._items) >= self.capacity:
            raise ChannelFullError(f"{self.name}: at capacity {self.capacity}")
        self._items.append(item)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        while True:
            getter = self._pop_live_getter()
            if getter is None:
                break
            getter.resolved = True
            getter.task.scheduler._resume(getter.task, CLOSED)
        while True:
            entry = self._pop_live_putter()
            if entry is None:
                break
            rec, _ = entry
            rec.resolved = True
            rec.task.scheduler._resume(rec.task, CLOSED)


class Task:
    """A spawned generator coroutine plus its completion event."""

    __slots__ = ("name", "gen", "scheduler", "alive", "done")

    def __init__(self, name: str, gen: Generator, scheduler: "Scheduler") -> None:
        self.name = name
        self.gen = gen
        self.scheduler = scheduler
        self.alive = True
        self.done = OneShot(f"{name}.done")

    def __repr__(self) -> str:
        state = "alive" if self.alive else "done"
        return f"Task({self.name}, {state})"


class Scheduler:
    """Drives tasks on a single clock, virtual by default.

    Virtual mode advances time directly to the next scheduled event.
    Real mode sleeps on the wall clock until the next event is due, so
    Sleep effects (environment latency, batching windows) actually elapse.
    """

    def __init__(self, real_time: bool = False, livelock_limit: int = 2_000_000) -> None:
        self.real_time = real_time
        self.livelock_limit = livelock_limit
        self._now = 0.0
        self._t0 = time.monotonic()
        self._seq = itertools.count()
        # heap entries: (time, seq, wait_record_or_None, thunk)
        self._heap: list[tuple[float, int, _WaitRecord | None, Callable[[], None]]] = []
        self._tasks: list[Task] = []
        self._alive = 0

    # -- clock ------------------------------------------------------------

    @property
    def now(self) -> float:
        if self.real_time:
            return time.monotonic() - self._t0
        return self._now

    # -- task management ---------------------------------------------------

    def spawn(self, name: str, gen: Generator) -> Task:
        task = Task(name, gen, self)
        self._tasks.append(task)
        self._alive += 1
        self._schedule(self.now, None, lambda: self._step(task, None))
        return task

    def alive_tasks(self) -> list[Task]:
        return [t for t in self._tasks if t.alive]

    def shutdown(self) -> None:
        """Cancel all live tasks (running their finally blocks)."""
        for task in self._tasks:
            if task.alive:
                task.alive = False
                self._alive -= 1
                task.gen.close()
                task.done.set(CANCELLED)
        self._heap.clear()

    # -- internals ----------------------------------------------------------

    def _schedule(
        self,
        at: float,
        record: _WaitRecord | None,
        thunk: Callable[[], None],
    ) -> None:
        heapq.heappush(self._heap, (at, next(self._seq), record, thunk))

    def _resume(self, task: Task, value: Any) -> None:
        self._schedule(self.now, None, lambda: self._step(task, value))

    def _finish(self, task: Task, value: Any) -> None:
        task.alive = False
        self._alive -= 1
        task.done.set(value)

    def _step(self, task: Task, send_value: Any, throw_exc: BaseException | None = None) -> None:
        if not task.alive:
            return
        try:
            if throw_exc is not None:
                effect = task.gen.throw(throw_exc)
            else:
                effect = task.gen.send(send_value)
        except StopIteration as stop:
            self._finish(task, stop.value)
            return
        except BaseException:
            # Fail fast: an uncaught error in any component aborts the run.
            self._finish(task, CANCELLED)
            raise
        try:
            self._dispatch(task, effect)
        except (ChannelClosedError, ValueError, TypeError) as exc:
            self._step(task, None, throw_exc=exc)

    def _dispatch(self, task: Task, effect: Any) -> None:
        if isinstance(effect, Sleep):
            if effect.seconds < 0:
                raise ValueError(f"{task.name}: negative sleep {effect.seconds}")
            self._schedule(self.now + effect.seconds, None, lambda: self._step(task, None))
        elif isinstance(effect, Get):
            self._do_get(task, effect)
        elif isinstance(effect, Put):
            self._do_put(task, effect)
        elif isinstance(effect, Wait):
            self._do_wait(task, effect)
        else:
            raise TypeError(f"{task.name}: yielded non-effect {effect!r}")

    def _do_get(self, task: Task, effect: Get) -> None:
        ch = effect.channel
        if ch._items:
            item = ch._items.popleft()
            # An item left the queue; admit one blocked putter if any.
            entry = ch._pop_live_putter()
            if entry is not None:
                rec, pending = entry
                rec.resolved = True
                ch._items.append(pending)
                self._resume(rec.task, None)
            self._resume(task, item)
            return
        if ch._closed:
            self._resume(task, CLOSED)
            return
        rec = _WaitRecord(task, f"get({ch.name})")
        ch._getters.append(rec)
        if effect.timeout is not None:
            self._add_timer(rec, effect.timeout)

    def _do_put(self, task: Task, effect: Put) -> None:
        ch = effect.channel
        if ch._closed:
            raise ChannelClosedError(f"{ch.name}: put on closed channel (task {task.name})")
        getter = ch._pop_live_getter()
        if getter is not None:
            getter.resolved = True
            self._resume(getter.task, effect.item)
            self._resume(task, None)
            return
        if ch.capacity is not None and len(ch._items) >= ch.capacity:
            rec = _WaitRecord(task, f"put({ch.name})")
            ch._putters.append((rec, effect.item))
            return
        ch._items.append(effect.item)
        self._resume(task, None)

    def _do_wait(self, task: Task, effect: Wait) -> None:
        ev = effect.event
        if ev.is_set:
            self._resume(task, ev.value)
            return
        rec = _WaitRecord(task, f"wait({ev.name})")
        ev._waiters.append(rec)
        if effect.timeout is not None:
            self._add_timer(rec, effect.timeout)

    def _add_timer(self, rec: _WaitRecord, timeout: float) -> None:
        if timeout < 0:
            raise ValueError(f"negative timeout {timeout}")

        def fire() -> None:
            if not rec.resolved:
                rec.resolved = True
                self._resume(rec.task, TIMEOUT)

        self._schedule(self.now + timeout, rec, fire)

    # -- main loop -----------------------------------------------------------

    def run(self, until: float | None = None) -> None:
        """Run until no live tasks remain, or clock time exceeds `until`."""
        stall_count = 0
        while self._alive > 0:
            # Drop timers whose wait already resolved; they are dead weight
            # and in real mode would cause pointless wall sleeps.
            while self._heap and self._heap[0][2] is not None and self._heap[0][2].resolved:
                heapq.heappop(self._heap)
            if not self._heap:
                blocked = ", ".join(t.name for t in self.alive_tasks())
                raise DeadlockError(f"all live tasks blocked forever: {blocked}")
            at = self._heap[0][0]
            if until is not None and at > until:
                if not self.real_time:
                    self._now = until
                return
            _, _, _, thunk = heapq.heappop(self._heap)
            if self.real_time:
                delay = at - self.now
                if delay > 0:
                    time.sleep(delay)
            else:
                if at > self._now:
                    self._now = at
                    stall_count = 0
                else:
                    stall_count += 1
                    if stall_count > self.livelock_limit:
                        raise LivelockError(
                            f"{stall_count} events without virtual time advancing "
                            f"past t={self._now:.6f}"
                        )
            thunk()


class StopFlag:
    """Latching shutdown signal checked at loop boundaries."""

    __slots__ = ("_set",)

    def __init__(self) -> None:
        self._set = False

    def set(self) -> None:
        self._set = True

    @property
    def is_set(self) -> bool:
        return self._set


def drain(channel: Channel) -> list[Any]:
    """Snapshot and empty a channel's queued items (non-task helper)."""
    items = list(channel._items)
    channel._items.clear()
    return items
