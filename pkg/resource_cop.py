# resource_cop.py
"""
Resource cop: per-request deadlines, watchdogs, usage budgets, leases and
software-aging prediction. The pure functions below carry the arithmetic;
ResourceCop owns one upstream's tables and runs them on a periodic tick.
"""
import math
import threading
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np
import psutil

from errors import ClockRegressionError, InsufficientSamplesError
from events import EventBus
from fuse_engine import Decision
from invariant_model import ResourceRule
from task_queue import TaskQueue
from utils import now_ms

SAMPLE_HISTORY = 1024
FORECAST_WINDOW = 64
MIN_FORECAST_SAMPLES = 3
MIN_R_SQUARED = 0.9
UPSTREAM_HOLDER = "upstream"


class WatchdogVerdict(str, Enum):
    ALIVE = "alive"
    EXPIRED = "expired"


class BudgetVerdict(str, Enum):
    OK = "ok"
    EXCEEDED = "exceeded"


@dataclass(frozen=True)
class RequestDeadline:
    issued_at: int
    ttl_ms: int
    request_id: str | None = None

    def remaining(self, now: int) -> int:
        return max(0, self.ttl_ms - (now - self.issued_at))


@dataclass(frozen=True)
class Budget:
    resource: str
    limit: int
    used: int = 0
    samples: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class Lease:
    holder: str
    granted_at: int
    duration_ms: int
    renewals: int = 0
    amount: int = 0

    def expired(self, now: int) -> bool:
        return now > self.granted_at + self.duration_ms


@dataclass(frozen=True)
class ExhaustionForecast:
    slope: float
    time_to_exhaustion_s: float
    r_squared: float


def deadline_check(deadline: RequestDeadline, now: int) -> Decision:
    return Decision.squash("ttl") if deadline.remaining(now) == 0 else Decision.admit()


def watchdog_check(started_at: int, now: int, watchdog_ms: int) -> WatchdogVerdict:
    """Strict boundary: a task finishing exactly at the limit is alive."""
    if now < started_at:
        raise ClockRegressionError(f"now={now} precedes started_at={started_at}")
    return WatchdogVerdict.EXPIRED if now - started_at > watchdog_ms else WatchdogVerdict.ALIVE


def account_usage(budget: Budget, delta: int, now: int) -> tuple[Budget, BudgetVerdict]:
    """
    Applies delta (negative releases) clamped at zero and appends a sample.
    A sample at or before the last timestamp overwrites that sample's value.
    """
    used = max(0, budget.used + delta)
    samples = budget.samples
    if samples and now <= samples[-1][0]:
        samples = samples[:-1] + ((samples[-1][0], used),)
    else:
        samples = (samples + ((now, used),))[-SAMPLE_HISTORY:]
    verdict = BudgetVerdict.EXCEEDED if used > budget.limit else BudgetVerdict.OK
    return replace(budget, used=used, samples=samples), verdict


def report_usage(budget: Budget, used: int, now: int) -> tuple[Budget, BudgetVerdict]:
    """Absolute usage report from a cooperative upstream, booked as a delta."""
    return account_usage(budget, used - budget.used, now)


def lease_tick(leases: Iterable[Lease], now: int) -> tuple[tuple[Lease, ...], tuple[Lease, ...]]:
    leases = tuple(leases)
    surviving = tuple(lease for lease in leases if not lease.expired(now))
    reclaimed = tuple(lease for lease in leases if lease.expired(now))
    return surviving, reclaimed


def renew_lease(lease: Lease, now: int) -> Lease:
    return replace(lease, granted_at=now, renewals=lease.renewals + 1)


def predict_exhaustion(budget: Budget, window: int = FORECAST_WINDOW) -> ExhaustionForecast:
    """
    Ordinary least squares of used vs time (seconds) over the most recent
    `window` samples. Raises InsufficientSamplesError with fewer than 2.
    """
    recent = budget.samples[-window:]
    if len(recent) < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, have {len(recent)}")

    t = np.array([ts for ts, _ in recent], dtype=float) / 1000.0
    y = np.array([used for _, used in recent], dtype=float)
    t_c = t - t.mean()
    y_c = y - y.mean()

    slope = float(np.dot(t_c, y_c) / np.dot(t_c, t_c))
    ss_tot = float(np.dot(y_c, y_c))
    residual = y_c - slope * t_c
    ss_res = float(np.dot(residual, residual))
    r_squared = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))

    if slope > 0:
        time_to_exhaustion_s = max(0.0, (budget.limit - recent[-1][1]) / slope)
    else:
        time_to_exhaustion_s = math.inf
    return ExhaustionForecast(slope, time_to_exhaustion_s, r_squared)


def plan_reboot(forecast: ExhaustionForecast, reboot_margin: float, now: int,
                min_r_squared: float = MIN_R_SQUARED) -> int | None:
    """Reboot instant (unix ms) at (1 - margin) of the forecast horizon, or None if no trustworthy trend."""
    if forecast.slope <= 0 or forecast.r_squared < min_r_squared or math.isinf(forecast.time_to_exhaustion_s):
        return None
    return now + int((1.0 - reboot_margin) * forecast.time_to_exhaustion_s * 1000)


def rss_usage_source(pid: int) -> Callable[[], int | None]:
    """Fallback usage source: resident set size of a supervised process."""
    def read_rss() -> int | None:
        try:
            return psutil.Process(pid).memory_info().rss
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            return None
    return read_rss


class ResourceCop:
    """
    Single owner of one upstream's budget, lease tables and planned reboot.
    Periodic work runs on its own TaskQueue; request bookkeeping is guarded
    by a lock because connection handlers call into it directly.
    """

    def __init__(self, rule: ResourceRule, event_bus: EventBus, task_queue: TaskQueue,
                 usage_source: Callable[[], int | None] | None = None, tick_ms: int = 50,
                 clock: Callable[[], int] = now_ms, forecast_window: int = FORECAST_WINDOW,
                 min_r_squared: float = MIN_R_SQUARED):
        self.rule = rule
        self.event_bus = event_bus
        self.task_queue = task_queue
        self.usage_source = usage_source
        self.tick_ms = tick_ms
        self.clock = clock
        self.forecast_window = forecast_window
        self.min_r_squared = min_r_squared

        self.budget = Budget("memory_bytes", rule.memory_budget_bytes)
        self.forecast: ExhaustionForecast | None = None
        self.planned_reboot_at: int | None = None
        self.deadlines: dict[str, RequestDeadline] = {}
        self.request_leases: dict[str, Lease] = {}
        self.upstream_lease: Lease | None = None
        self.paused = False
        self._exceeded = False
        self._lock = threading.Lock()
        self._tick_task = None

    def start(self):
        self.task_queue.start()
        self._tick_task = self.task_queue.call_every(self.tick_ms / 1000.0, "cop tick", self.tick)

    def stop(self):
        if self._tick_task:
            self._tick_task.cancel()
        self.task_queue.stop()

    # --- Requests ---

    def begin_request(self, request_id: str, now: int | None = None) -> RequestDeadline:
        now = self.clock() if now is None else now
        deadline = RequestDeadline(now, self.rule.request_ttl_ms, request_id)
        with self._lock:
            self.deadlines[request_id] = deadline
            self.request_leases[request_id] = Lease(request_id, now, self.rule.request_ttl_ms)
        return deadline

    def charge_request(self, request_id: str, amount: int, now: int | None = None) -> BudgetVerdict | None:
        """
        Books bytes held on behalf of an in-flight request on its lease and the
        budget; they are released when the request ends or its lease is
        reclaimed. With a usage source the upstream's own figure is
        authoritative, so nothing is booked.
        """
        if self.usage_source is not None or amount <= 0:
            return None
        with self._lock:
            lease = self.request_leases.get(request_id)
            if lease is None:
                return None
            self.request_leases[request_id] = replace(lease, amount=lease.amount + amount)
        return self.account(amount, now)

    def end_request(self, request_id: str):
        with self._lock:
            self.deadlines.pop(request_id, None)
            lease = self.request_leases.pop(request_id, None)
        if lease and lease.amount:
            self.account(-lease.amount)

    def check_deadline(self, request_id: str, now: int | None = None) -> Decision:
        """Squashing frees every record kept for the request."""
        now = self.clock() if now is None else now
        with self._lock:
            deadline = self.deadlines.get(request_id)
        if deadline is None:
            return Decision.squash("ttl")
        decision = deadline_check(deadline, now)
        if not decision.admitted:
            self.end_request(request_id)
        return decision

    def in_flight(self) -> int:
        with self._lock:
            return len(self.deadlines)

    # --- Usage ---

    def account(self, delta: int, now: int | None = None) -> BudgetVerdict:
        now = self.clock() if now is None else now
        with self._lock:
            self.budget, verdict = account_usage(self.budget, delta, now)
        self._on_verdict(verdict)
        return verdict

    def record_usage(self, used: int, now: int | None = None) -> BudgetVerdict:
        now = self.clock() if now is None else now
        with self._lock:
            self.budget, verdict = report_usage(self.budget, used, now)
        self._on_verdict(verdict)
        return verdict

    def submit_usage(self, used: int):
        """Serialized channel for usage events coming from other threads."""
        self.task_queue.submit("usage report", self.record_usage, used)

    def _on_verdict(self, verdict: BudgetVerdict):
        if verdict is BudgetVerdict.EXCEEDED and not self._exceeded and not self.paused:
            self._exceeded = True
            logging.warning(f"Memory budget exceeded: {self.budget.used} > {self.budget.limit} bytes")
            self.event_bus.publish("cop:budget_exceeded", self.budget)

    # --- Leases ---

    def renew_upstream_lease(self, now: int | None = None):
        """The liveness lease is armed only when there is a usage source to keep renewing it."""
        if self.usage_source is None:
            return
        now = self.clock() if now is None else now
        with self._lock:
            if self.upstream_lease is None:
                self.upstream_lease = Lease(UPSTREAM_HOLDER, now, self.rule.lease_duration_ms)
            else:
                self.upstream_lease = renew_lease(self.upstream_lease, now)

    def _sweep_leases(self, now: int):
        with self._lock:
            surviving, reclaimed = lease_tick(self.request_leases.values(), now)
            self.request_leases = {lease.holder: lease for lease in surviving}
            for lease in reclaimed:
                self.deadlines.pop(lease.holder, None)
            upstream_expired = self.upstream_lease is not None and self.upstream_lease.expired(now)
            expired_upstream = self.upstream_lease if upstream_expired else None
            if upstream_expired:
                self.upstream_lease = None

        for lease in reclaimed:
            logging.debug(f"Reclaimed lease of request {lease.holder}")
            if lease.amount:
                self.account(-lease.amount, now)
        if expired_upstream is not None and not self.paused:
            logging.warning(f"Upstream lease expired after {self.rule.lease_duration_ms} ms without renewal")
            self.event_bus.publish("cop:lease_expired", expired_upstream)

    # --- Periodic work ---

    def tick(self, now: int | None = None):
        now = self.clock() if now is None else now
        if self.paused:
            return

        if self.usage_source is not None:
            # A poll that answers at all proves liveness, even without a usage figure.
            try:
                used = self.usage_source()
            except Exception as e:
                logging.debug(f"Usage poll failed: {e}")
            else:
                self.renew_upstream_lease(now)
                if used is not None:
                    self.record_usage(used, now)

        self._sweep_leases(now)
        self._update_forecast(now)

        if self.planned_reboot_at is not None and now >= self.planned_reboot_at and not self.paused:
            logging.info(f"Planned reboot firing; forecast exhaustion in "
                         f"{self.forecast.time_to_exhaustion_s:.2f} s")
            self.planned_reboot_at = None
            self.event_bus.publish("cop:planned_reboot", self.forecast)

    def _update_forecast(self, now: int):
        with self._lock:
            budget = self.budget
        if len(budget.samples) < MIN_FORECAST_SAMPLES:
            return
        self.forecast = predict_exhaustion(budget, self.forecast_window)
        if self.forecast.slope <= 0 and self.planned_reboot_at is not None:
            logging.info("Aging trend gone; planned reboot cancelled")
            self.planned_reboot_at = None
        planned = plan_reboot(self.forecast, self.rule.reboot_margin, now, self.min_r_squared)
        if planned is not None and (self.planned_reboot_at is None or planned < self.planned_reboot_at):
            if self.planned_reboot_at is None:
                logging.info(f"Aging trend {self.forecast.slope:.1f} B/s (r²={self.forecast.r_squared:.3f}); "
                             f"planned reboot in {(planned - now) / 1000:.2f} s")
            self.planned_reboot_at = planned

    def pause(self):
        """Stops enforcement while the upstream is suspended or rebooting."""
        self.paused = True

    def reset(self, now: int | None = None):
        """Fresh accounting after the upstream came back from a reboot."""
        now = self.clock() if now is None else now
        with self._lock:
            self.budget = Budget(self.budget.resource, self.budget.limit)
            self.forecast = None
            self.planned_reboot_at = None
            self._exceeded = False
            self.upstream_lease = Lease(UPSTREAM_HOLDER, now, self.rule.lease_duration_ms) \
                if self.usage_source is not None else None
        self.paused = False
