# task_queue.py
import heapq
import itertools
import threading
import time
import logging
from dataclasses import dataclass, field
from typing import Callable, Any, Tuple

from events import EventBus


@dataclass(order=True)
class Task:
    """A unit of work for the TaskQueue. Periodic tasks have an interval."""
    due_at: float
    seq: int
    name: str = field(compare=False)
    target: Callable = field(compare=False)
    args: Tuple[Any, ...] = field(default=(), compare=False)
    interval_s: float | None = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)

    @property
    def is_periodic(self) -> bool:
        return self.interval_s is not None

    def cancel(self):
        self.cancelled = True


class TaskQueue:
    """
    Executes submitted tasks one at a time on a single background thread.

    Everything that mutates per-upstream state (cop budgets and lease tables,
    the reboot controller) goes through one queue, so that state has exactly
    one owner and needs no further ordering between callers.
    """

    def __init__(self, event_bus: EventBus, name: str = "guardrail-worker"):
        self.event_bus = event_bus
        self.name = name
        self._heap: list[Task] = []
        self._counter = itertools.count()
        self._cond = threading.Condition()
        self._worker_thread = None
        self._is_running = False

    def submit(self, name: str, target: Callable, *args) -> Task:
        """Runs target(*args) as soon as the worker is free."""
        return self.call_later(0.0, name, target, *args)

    def call_later(self, delay_s: float, name: str, target: Callable, *args) -> Task:
        task = Task(time.monotonic() + max(0.0, delay_s), next(self._counter), name, target, args)
        self._push(task)
        return task

    def call_every(self, interval_s: float, name: str, target: Callable, *args) -> Task:
        if interval_s <= 0:
            raise ValueError("interval_s must be > 0")
        task = Task(time.monotonic() + interval_s, next(self._counter), name, target, args, interval_s)
        self._push(task)
        return task

    def _push(self, task: Task):
        with self._cond:
            heapq.heappush(self._heap, task)
            self._cond.notify()

    def pending(self) -> list[str]:
        with self._cond:
            return [t.name for t in sorted(self._heap) if not t.cancelled]

    def start(self):
        """Starts the worker thread if it's not already running."""
        if self._is_running:
            return
        self._is_running = True
        self._worker_thread = threading.Thread(target=self._run_worker, name=self.name, daemon=True)
        self._worker_thread.start()
        logging.debug(f"Task queue '{self.name}' started.")

    def stop(self, timeout_s: float = 2.0):
        with self._cond:
            self._is_running = False
            self._cond.notify_all()
        if self._worker_thread and self._worker_thread is not threading.current_thread():
            self._worker_thread.join(timeout=timeout_s)
        logging.debug(f"Task queue '{self.name}' stopped.")

    def _next_task(self) -> Task | None:
        with self._cond:
            while self._is_running:
                if not self._heap:
                    self._cond.wait()
                    continue
                head = self._heap[0]
                if head.cancelled:
                    heapq.heappop(self._heap)
                    continue
                wait_s = head.due_at - time.monotonic()
                if wait_s > 0:
                    self._cond.wait(timeout=wait_s)
                    continue
                return heapq.heappop(self._heap)
            return None

    def _run_worker(self):
        """The main loop for the background worker thread."""
        while (task := self._next_task()) is not None:
            try:
                task.target(*task.args)
            except Exception as e:
                logging.error(f"Task '{task.name}' failed: {e}", exc_info=True)
                self.event_bus.publish("queue:task_failed", task.name, e)

            if task.is_periodic and not task.cancelled:
                task.due_at += task.interval_s
                # A tick that overran its slot is not replayed in a burst.
                task.due_at = max(task.due_at, time.monotonic())
                task.seq = next(self._counter)
                self._push(task)
