"""Kernel background-task execution.

Ten priority levels (9 most urgent), FIFO within a level. Time slicing is
cooperative: a task body may be a plain callable (runs to completion inside
its first quantum) or a generator that yields at safe points; a generator
exceeding its quantum is re-enqueued at the back of its priority class.
Stall reaping replaces preemption: a task whose accumulated runtime passes
``max_runtime_ms`` is cancelled on the next housekeeping tick.

The queue discipline (submit/next/run_quantum/reap_stalled/cancel) is fully
usable without the executor thread, which is how the reference-oracle tests
drive it.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from types import GeneratorType
from typing import Callable, Optional

from .clock import SYSTEM_CLOCK, SystemClock
from .errors import AlreadyDone, EmptyQueue, InvalidTask, UnknownTask

logger = logging.getLogger(__name__)

HOUSEKEEPING_TICK_S = 0.010  # timer resolution


class TaskState(Enum):
    Queued = "Queued"
    Running = "Running"
    Yielded = "Yielded"
    Done = "Done"
    Failed = "Failed"
    Reaped = "Reaped"
    Cancelled = "Cancelled"


class RunOutcome(Enum):
    Completed = "Completed"
    Yielded = "Yielded"
    Failed = "Failed"
    Cancelled = "Cancelled"


@dataclass(frozen=True)
class Immediate:
    pass


@dataclass(frozen=True)
class At:
    when: float  # wall-clock epoch seconds


@dataclass(frozen=True)
class OnEvent:
    topic: str


Trigger = "Immediate | At | OnEvent"


@dataclass
class Task:
    body: Callable[[], object]
    task_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    priority: int = 5
    quantum_ms: float = 50.0
    max_runtime_ms: float = 10_000.0
    trigger: object = field(default_factory=Immediate)
    state: TaskState = TaskState.Queued
    enqueue_seq: int = -1
    runtime_ms: float = 0.0
    resumptions: int = 0
    error: Optional[str] = None
    _gen: Optional[GeneratorType] = field(default=None, repr=False)
    _cancel_requested: bool = field(default=False, repr=False)

    def validate(self) -> None:
        if not 0 <= self.priority <= 9:
            raise InvalidTask(f"priority {self.priority} outside 0..9")
        if self.quantum_ms <= 0:
            raise InvalidTask("quantum_ms must be > 0")
        if self.quantum_ms > self.max_runtime_ms:
            raise InvalidTask("quantum_ms must be <= max_runtime_ms")


class Scheduler:
    def __init__(self, clock: SystemClock = SYSTEM_CLOCK, bus=None,
                 log: Optional[Callable[[str, str], None]] = None):
        self._clock = clock
        self._bus = bus
        self._log = log or (lambda level, msg: None)
        self._seq = itertools.count()
        self._lock = threading.Condition()
        self._ready: list[tuple[int, int, Task]] = []  # (-priority, seq, task)
        self._timers: list[tuple[float, int, Task]] = []  # (due_mono, seq, task)
        self._tasks: dict[str, Task] = {}
        self._event_templates: dict[str, tuple[Task, object]] = {}  # id -> (task, subscription)
        self._counts = {"submitted": 0, "completed": 0, "failed": 0,
                        "reaped": 0, "cancelled": 0}
        self._thread: Optional[threading.Thread] = None
        self._stop = False

    # -- intake ---------------------------------------------------------

    def submit(self, task: Task) -> str:
        task.validate()
        trigger = task.trigger
        with self._lock:
            if task.task_id in self._tasks:
                raise InvalidTask(f"duplicate task_id {task.task_id!r}")
            self._tasks[task.task_id] = task
            self._counts["submitted"] += 1
            if isinstance(trigger, Immediate):
                self._enqueue_locked(task)
            elif isinstance(trigger, At):
                delay = max(0.0, trigger.when - self._clock.wall())
                heapq.heappush(self._timers, (self._clock.mono() + delay, next(self._seq), task))
                self._lock.notify()
            elif isinstance(trigger, OnEvent):
                if self._bus is None:
                    raise InvalidTask("OnEvent trigger requires a bus")
                sub = self._bus.subscribe(
                    trigger.topic, f"sched:{task.task_id}",
                    callback=lambda env, t=task: self._spawn_from_event(t))
                self._event_templates[task.task_id] = (task, sub)
            else:
                raise InvalidTask(f"unknown trigger {trigger!r}")
        return task.task_id

    def _spawn_from_event(self, template: Task) -> None:
        with self._lock:
            if template._cancel_requested:
                return
            n = sum(1 for t in self._tasks if t.startswith(template.task_id + "#"))
            clone = Task(
                body=template.body,
                task_id=f"{template.task_id}#{n + 1}",
                priority=template.priority,
                quantum_ms=template.quantum_ms,
                max_runtime_ms=template.max_runtime_ms,
            )
            self._tasks[clone.task_id] = clone
            self._counts["submitted"] += 1
            self._enqueue_locked(clone)

    def _enqueue_locked(self, task: Task) -> None:
        task.state = TaskState.Queued
        task.enqueue_seq = next(self._seq)
        heapq.heappush(self._ready, (-task.priority, task.enqueue_seq, task))
        self._lock.notify()

    # -- queue discipline -------------------------------------------------

    def next(self) -> Task:
        """Claim the highest-priority ready task (FIFO within a priority)."""
        with self._lock:
            task = self._pop_ready_locked()
            if task is None:
                raise EmptyQueue("ready queue is empty")
            return task

    def _pop_ready_locked(self) -> Optional[Task]:
        while self._ready:
            _, _, task = heapq.heappop(self._ready)
            if task.state is TaskState.Queued:
                return task
            # stale entry: task was cancelled or reaped while queued
        return None

    def run_quantum(self, task: Task) -> RunOutcome:
        if task.state is not TaskState.Queued:
            raise InvalidTask(f"task {task.task_id} not runnable (state {task.state.name})")
        task.state = TaskState.Running
        task.resumptions += 1
        start = self._clock.mono()

        def elapsed_ms() -> float:
            return (self._clock.mono() - start) * 1000.0

        def finish(state: TaskState, outcome: RunOutcome) -> RunOutcome:
            task.runtime_ms += elapsed_ms()
            task.state = state
            key = {RunOutcome.Completed: "completed", RunOutcome.Failed: "failed",
                   RunOutcome.Cancelled: "cancelled"}.get(outcome)
            if key:
                with self._lock:
                    self._counts[key] += 1
            return outcome

        if task._cancel_requested:
            return finish(TaskState.Cancelled, RunOutcome.Cancelled)

        try:
            if task._gen is None:
                result = task.body()
                if not isinstance(result, GeneratorType):
                    return finish(TaskState.Done, RunOutcome.Completed)
                task._gen = result
            while True:
                if task._cancel_requested:
                    task._gen.close()
                    return finish(TaskState.Cancelled, RunOutcome.Cancelled)
                try:
                    next(task._gen)
                except StopIteration:
                    return finish(TaskState.Done, RunOutcome.Completed)
                if elapsed_ms() >= task.quantum_ms:
                    task.runtime_ms += elapsed_ms()
                    task.state = TaskState.Yielded
                    with self._lock:
                        self._enqueue_locked(task)  # back of its priority class
                    return RunOutcome.Yielded
        except Exception as exc:
            task.error = f"{type(exc).__name__}: {exc}"
            self._log("Error", f"task {task.task_id} failed: {task.error}")
            logger.debug("task %s failed", task.task_id, exc_info=True)
            return finish(TaskState.Failed, RunOutcome.Failed)

    def reap_stalled(self, now: Optional[float] = None) -> list[str]:
        """Reap queued tasks whose accumulated runtime passed their limit."""
        reaped = []
        with self._lock:
            for task in list(self._tasks.values()):
                if task.state in (TaskState.Queued, TaskState.Yielded) \
                        and task.runtime_ms > task.max_runtime_ms:
                    task.state = TaskState.Reaped
                    self._counts["reaped"] += 1
                    reaped.append(task.task_id)
        for task_id in reaped:
            self._log("Warn", f"task {task_id} reaped: exceeded max_runtime_ms")
        return reaped

    def cancel(self, task_id: str) -> None:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise UnknownTask(task_id)
            if task.state in (TaskState.Done, TaskState.Failed,
                              TaskState.Reaped, TaskState.Cancelled):
                raise AlreadyDone(f"task {task_id} is {task.state.name}")
            if task.task_id in self._event_templates:
                template, sub = self._event_templates.pop(task.task_id)
                template._cancel_requested = True
                template.state = TaskState.Cancelled
                self._counts["cancelled"] += 1
                sub.close()
                return
            if task.state is TaskState.Queued:
                task.state = TaskState.Cancelled
                self._counts["cancelled"] += 1
                return
            # Running: honored at the next yield point
            task._cancel_requested = True

    # -- housekeeping and executor ---------------------------------------

    def _fire_timers_locked(self) -> None:
        now = self._clock.mono()
        while self._timers and self._timers[0][0] <= now:
            _, _, task = heapq.heappop(self._timers)
            if task.state is TaskState.Queued and not task._cancel_requested:
                self._enqueue_locked(task)

    def housekeeping(self) -> None:
        with self._lock:
            self._fire_timers_locked()
        self.reap_stalled()

    def pump(self, max_tasks: int = 100) -> int:
        """Synchronously run up to *max_tasks* quanta; for tests and tools."""
        ran = 0
        for _ in range(max_tasks):
            self.housekeeping()
            with self._lock:
                task = self._pop_ready_locked()
            if task is None:
                break
            self.run_quantum(task)
            ran += 1
        return ran

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop = False
        self._thread = threading.Thread(target=self._run, name="muk-scheduler", daemon=True)
        self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        with self._lock:
            self._stop = True
            self._lock.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def _run(self) -> None:
        next_tick = self._clock.mono()
        while True:
            do_reap = False
            with self._lock:
                if self._stop:
                    return
                now = self._clock.mono()
                if now >= next_tick:
                    self._fire_timers_locked()
                    do_reap = True
                    next_tick = now + HOUSEKEEPING_TICK_S
                task = self._pop_ready_locked()
                if task is None and not do_reap:
                    self._lock.wait(timeout=max(0.001, next_tick - now))
                    continue
            if do_reap:
                self.reap_stalled()
            if task is not None and task.state is TaskState.Queued:
                try:
                    self.run_quantum(task)
                except Exception:
                    logger.exception("executor error running task %s", task.task_id)

    # -- introspection -----------------------------------------------------

    def get(self, task_id: str) -> Task:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise UnknownTask(task_id)
            return task

    def ledger(self) -> dict:
        with self._lock:
            live = sum(1 for t in self._tasks.values()
                       if t.state in (TaskState.Queued, TaskState.Running, TaskState.Yielded))
            live += len(self._event_templates)
            counts = dict(self._counts)
        counts["live"] = live
        counts["balanced"] = counts["submitted"] == (
            counts["completed"] + counts["failed"] + counts["reaped"]
            + counts["cancelled"] + live)
        return counts

    def stats(self) -> dict:
        with self._lock:
            by_state: dict[str, int] = {}
            for task in self._tasks.values():
                by_state[task.state.name] = by_state.get(task.state.name, 0) + 1
            return {
                "ready_depth": sum(1 for *_, t in self._ready if t.state is TaskState.Queued),
                "timer_depth": len(self._timers),
                "event_templates": len(self._event_templates),
                "by_state": by_state,
            }


class PeriodicHandle:
    """Cancellation handle for a self-resubmitting periodic task chain."""

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


def schedule_periodic(scheduler: Scheduler, name: str, period_s: float,
                      fn: Callable[[], None], priority: int = 5,
                      clock: SystemClock = SYSTEM_CLOCK) -> PeriodicHandle:
    """Run *fn* every *period_s*. Errors are logged; the chain survives them."""
    handle = PeriodicHandle()
    counter = itertools.count(1)

    def body():
        if handle.cancelled:
            return
        try:
            fn()
        except Exception:
            logger.exception("periodic task %s iteration failed", name)
        if not handle.cancelled:
            scheduler.submit(Task(
                body=body,
                task_id=f"{name}@{next(counter)}",
                priority=priority,
                quantum_ms=60_000, max_runtime_ms=60_000,
                trigger=At(clock.wall() + period_s),
            ))

    scheduler.submit(Task(body=body, task_id=f"{name}@0", priority=priority,
                          quantum_ms=60_000, max_runtime_ms=60_000))
    return handle
