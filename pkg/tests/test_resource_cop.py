import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from errors import ClockRegressionError, InsufficientSamplesError
from events import EventBus
from fuse_engine import Decision
from invariant_model import ResourceRule
from resource_cop import (Budget, BudgetVerdict, ExhaustionForecast, Lease, RequestDeadline, ResourceCop,
                          WatchdogVerdict, account_usage, deadline_check, lease_tick, plan_reboot,
                          predict_exhaustion, renew_lease, report_usage, watchdog_check)
from task_queue import TaskQueue


def test_expired_deadline_squashes():
    deadline = RequestDeadline(0, 500)
    assert deadline_check(deadline, 600) == Decision.squash("ttl")
    assert deadline_check(deadline, 499).admitted
    assert deadline.remaining(499) == 1


def test_watchdog_boundary_is_alive():
    assert watchdog_check(0, 1001, 1000) is WatchdogVerdict.EXPIRED
    assert watchdog_check(0, 1000, 1000) is WatchdogVerdict.ALIVE
    with pytest.raises(ClockRegressionError):
        watchdog_check(10, 5, 1000)


def test_usage_past_limit_is_exceeded():
    budget = Budget("memory_bytes", 8_000_000, used=7_999_999)
    budget, verdict = account_usage(budget, 80, 1)
    assert verdict is BudgetVerdict.EXCEEDED
    assert budget.used == 8_000_079


def test_release_clamps_at_zero():
    budget, verdict = account_usage(Budget("memory_bytes", 1000, used=400), -500, 1)
    assert budget.used == 0
    assert verdict is BudgetVerdict.OK


def test_sample_at_same_instant_overwrites():
    budget = Budget("memory_bytes", 1000)
    budget, _ = account_usage(budget, 10, 5)
    budget, _ = account_usage(budget, 10, 5)
    assert budget.samples == ((5, 20),)


def test_absolute_report_is_booked_as_delta():
    budget, _ = report_usage(Budget("memory_bytes", 1000, used=300), 120, 7)
    assert budget.used == 120
    assert budget.samples[-1] == (7, 120)


@given(st.lists(st.integers(-1000, 1000), max_size=100))
def test_usage_matches_clamped_prefix_sum(deltas):
    budget, expected = Budget("memory_bytes", 10_000), 0
    for t, delta in enumerate(deltas):
        budget, verdict = account_usage(budget, delta, t)
        expected = max(0, expected + delta)
        assert budget.used == expected
        assert (verdict is BudgetVerdict.EXCEEDED) == (expected > 10_000)


def test_lease_tick_partitions_leases():
    leases = [Lease("a", 0, 100), Lease("b", 50, 100), Lease("c", 0, 1000)]
    surviving, reclaimed = lease_tick(leases, 120)
    assert [l.holder for l in surviving] == ["b", "c"]
    assert [l.holder for l in reclaimed] == ["a"]


def test_renewal_moves_grant_forward():
    lease = renew_lease(Lease("u", 0, 100), 90)
    assert lease.granted_at == 90
    assert lease.renewals == 1
    assert not lease.expired(150)


def test_linear_growth_forecasts_exhaustion():
    budget = Budget("memory_bytes", 8_000_000, used=8000, samples=((0, 0), (1000, 8000)))
    forecast = predict_exhaustion(budget)
    assert forecast.slope == pytest.approx(8000.0)
    assert forecast.time_to_exhaustion_s == pytest.approx(999.0)
    assert forecast.r_squared == pytest.approx(1.0)


def test_flat_usage_never_exhausts():
    budget = Budget("memory_bytes", 100, samples=((0, 50), (1000, 50), (2000, 50)))
    forecast = predict_exhaustion(budget)
    assert forecast.slope == 0
    assert math.isinf(forecast.time_to_exhaustion_s)
    assert plan_reboot(forecast, 0.1, 0) is None


def test_forecast_needs_two_samples():
    with pytest.raises(InsufficientSamplesError):
        predict_exhaustion(Budget("memory_bytes", 100, samples=((0, 1),)))


@given(st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 10**6)), min_size=2, max_size=50,
                unique_by=lambda s: s[0]))
def test_slope_matches_least_squares_oracle(samples):
    samples = tuple(sorted(samples))
    forecast = predict_exhaustion(Budget("memory_bytes", 10**7, samples=samples))
    t = np.array([s[0] for s in samples]) / 1000.0
    y = np.array([s[1] for s in samples], dtype=float)
    expected = np.polyfit(t, y, 1)[0]
    assert forecast.slope == pytest.approx(expected, rel=1e-6, abs=1e-4)
    assert 0.0 <= forecast.r_squared <= 1.0


def test_reboot_is_planned_inside_the_margin():
    forecast = ExhaustionForecast(slope=100.0, time_to_exhaustion_s=10.0, r_squared=0.99)
    assert plan_reboot(forecast, 0.1, 1000) == 1000 + 9000
    noisy = ExhaustionForecast(slope=100.0, time_to_exhaustion_s=10.0, r_squared=0.5)
    assert plan_reboot(noisy, 0.1, 1000) is None


# --- ResourceCop ---

class FakeClock:
    def __init__(self, now: int = 0):
        self.now = now

    def __call__(self) -> int:
        return self.now


def make_cop(usage_source=None, **rule_kwargs):
    bus, events = EventBus(), []
    for name in ("cop:budget_exceeded", "cop:planned_reboot", "cop:lease_expired"):
        bus.subscribe(name, lambda payload, name=name: events.append(name))
    rule = ResourceRule(**{"request_ttl_ms": 500, "watchdog_ms": 1000, "memory_budget_bytes": 8000,
                           "lease_duration_ms": 200, **rule_kwargs})
    clock = FakeClock()
    cop = ResourceCop(rule, bus, TaskQueue(bus, "test-cop"), usage_source, tick_ms=50, clock=clock)
    return cop, clock, events


def test_squash_frees_request_records():
    cop, clock, _ = make_cop()
    cop.begin_request("r1")
    assert cop.in_flight() == 1
    clock.now = 600
    assert cop.check_deadline("r1") == Decision.squash("ttl")
    assert cop.in_flight() == 0
    assert "r1" not in cop.request_leases


def test_request_leases_are_reclaimed_on_tick():
    cop, clock, _ = make_cop()
    cop.begin_request("r1")
    clock.now = 501
    cop.tick()
    assert cop.in_flight() == 0


def test_linear_leak_plans_reboot_before_budget_runs_out():
    leaked = {"bytes": 0}
    cop, clock, events = make_cop(usage_source=lambda: leaked["bytes"])
    for _ in range(60):
        clock.now += 50
        leaked["bytes"] += 200
        cop.tick()
        if events:
            break
    assert events[0] == "cop:planned_reboot"
    assert leaked["bytes"] < 8000


def test_budget_exceeded_is_published_once():
    cop, _, events = make_cop()
    cop.record_usage(9000)
    cop.record_usage(9500)
    assert events == ["cop:budget_exceeded"]


def test_silent_upstream_loses_its_lease():
    answering = {"up": True}

    def source():
        if not answering["up"]:
            raise ConnectionError("no answer")
        return None

    cop, clock, events = make_cop(usage_source=source)
    clock.now = 50
    cop.tick()
    assert cop.upstream_lease is not None
    answering["up"] = False
    for _ in range(5):
        clock.now += 50
        cop.tick()
    assert events == ["cop:lease_expired"]


def test_paused_cop_stays_quiet_and_reset_rearms():
    cop, clock, events = make_cop(usage_source=lambda: 9000)
    cop.pause()
    clock.now = 50
    cop.tick()
    assert events == []
    cop.reset()
    assert cop.budget.used == 0
    assert cop.upstream_lease.granted_at == 50
    cop.tick()
    assert events == ["cop:budget_exceeded"]


def test_lease_is_not_armed_without_usage_source():
    cop, _, _ = make_cop()
    cop.renew_upstream_lease()
    cop.reset()
    assert cop.upstream_lease is None


def test_reclaimed_lease_releases_its_bytes():
    cop, clock, _ = make_cop()
    cop.begin_request("r1")
    cop.begin_request("r2")
    cop.charge_request("r1", 3000)
    cop.charge_request("r2", 1000)
    assert cop.budget.used == 4000
    cop.end_request("r2")
    assert cop.budget.used == 3000
    clock.now = 501
    cop.tick()
    assert cop.budget.used == 0
    assert cop.request_leases == {}


def test_charges_past_the_budget_are_exceeded():
    cop, _, events = make_cop()
    cop.begin_request("r1")
    assert cop.charge_request("r1", 9000) is BudgetVerdict.EXCEEDED
    assert events == ["cop:budget_exceeded"]


def test_upstream_figure_wins_over_request_charges():
    cop, _, _ = make_cop(usage_source=lambda: 100)
    cop.begin_request("r1")
    assert cop.charge_request("r1", 3000) is None
    assert cop.budget.used == 0


def test_recovered_trend_cancels_planned_reboot():
    usage = {"bytes": 0}
    cop, clock, events = make_cop(usage_source=lambda: usage["bytes"])
    for _ in range(5):
        clock.now += 50
        usage["bytes"] += 100
        cop.tick()
    assert cop.planned_reboot_at is not None

    usage["bytes"] = 0
    for _ in range(10):
        clock.now += 50
        cop.tick()
    assert cop.forecast.slope <= 0
    assert cop.planned_reboot_at is None
    assert events == []
