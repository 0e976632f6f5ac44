import pytest
from hypothesis import given, strategies as st

from errors import ClockRegressionError
from events import EventBus
from fuse_engine import (Decision, FuseEngine, RateWindowState, Verdict, adapt_rate_cap, admit_growth,
                         admit_rate, evaluate_static)
from invariant_model import InputRule
from utils import LineLog, ceil_scaled

SIZE_1K = InputRule("max_size_bytes", 1024)
ASCII = InputRule("charset_ascii")
NUL = InputRule("forbidden_byte_sequence", b"\x00")


def rate(cap, window_ms=1000, target=None):
    return InputRule("max_rate_per_window", cap, window_ms=window_ms, target_latency_ms=target)


def growth(factor, window_ms=1000):
    return InputRule("max_growth_factor", factor, window_ms=window_ms)


# --- Static rules ---

def test_oversized_body_is_rejected_by_size_rule():
    assert evaluate_static(b"x" * 2048, [SIZE_1K]) == Decision.reject("size", 0)


def test_non_ascii_body_is_rejected_by_charset_rule():
    assert evaluate_static(b"\xff", [SIZE_1K, ASCII]) == Decision.reject("charset", 1)


def test_first_failing_rule_wins():
    assert evaluate_static(b"\xff" * 2048, [ASCII, SIZE_1K]) == Decision.reject("charset", 0)


def test_forbidden_sequence_anywhere_in_body():
    assert evaluate_static(b"ab\x00cd", [NUL]) == Decision.reject("forbidden", 0)


def test_dynamic_rules_keep_their_ids_but_are_skipped():
    rules = [rate(1), SIZE_1K]
    assert evaluate_static(b"x" * 2000, rules) == Decision.reject("size", 1)
    assert evaluate_static(b"ok", rules).admitted


def test_empty_body_passes_all_static_rules():
    assert evaluate_static(b"", [SIZE_1K, ASCII, NUL]).admitted


@given(st.binary(max_size=2048))
def test_static_evaluation_is_sound_and_complete(body):
    rules = [SIZE_1K, ASCII, NUL]
    decision = evaluate_static(body, rules)
    ok = len(body) <= 1024 and body.isascii() and b"\x00" not in body
    assert decision.admitted == ok
    if not ok:
        assert decision.verdict is Verdict.REJECT


def test_decision_invariants():
    with pytest.raises(ValueError):
        Decision(Verdict.ADMIT, reason="size")
    with pytest.raises(ValueError):
        Decision(Verdict.SHED, reason="rate")
    assert Decision.squash().reason == "ttl"


# --- Rate fuse ---

def test_window_full_sheds():
    rule = rate(100)
    state = RateWindowState(0, 100, 0, 100)
    decision, after = admit_rate(500, state, rule)
    assert decision == Decision.shed("rate", 0)
    assert after.admitted_in_window == 100


def test_double_offered_load_is_halved_over_ten_windows():
    rule, state = rate(100), RateWindowState()
    admitted = shed = 0
    for w in range(10):
        for i in range(200):
            decision, state = admit_rate(w * 1000 + i * 5, state, rule)
            if decision.admitted:
                admitted += 1
            else:
                shed += 1
    assert (admitted, shed) == (1000, 1000)


def test_window_boundary_starts_new_window():
    rule, state = rate(1), RateWindowState()
    first, state = admit_rate(0, state, rule)
    second, state = admit_rate(999, state, rule)
    third, state = admit_rate(1000, state, rule)
    assert [first.admitted, second.admitted, third.admitted] == [True, False, True]
    assert state.window_start == 1000


def test_clock_regression_is_an_error():
    state = RateWindowState(5000, 1, 0, 10)
    with pytest.raises(ClockRegressionError):
        admit_rate(4999, state, rate(10))


def test_admit_rate_refuses_other_kinds():
    with pytest.raises(ValueError):
        admit_rate(0, RateWindowState(), growth(1.2))


@given(st.lists(st.integers(0, 50), min_size=1, max_size=200), st.integers(1, 20))
def test_no_window_admits_more_than_cap(gaps, cap):
    rule, state = rate(cap, 100), RateWindowState()
    now, per_window = 0, {}
    for gap in gaps:
        now += gap
        decision, state = admit_rate(now, state, rule)
        if decision.admitted:
            per_window[state.window_start] = per_window.get(state.window_start, 0) + 1
    assert all(count <= cap for count in per_window.values())


# --- Growth fuse ---

def test_growth_is_capped_at_factor_times_previous_window():
    rule = growth(1.2)
    state = RateWindowState(0, 100, 0, 12)
    admitted = shed = 0
    for i in range(200):
        decision, state = admit_growth(1000 + i, state, rule)
        admitted += decision.admitted
        shed += not decision.admitted
    assert (admitted, shed) == (120, 80)
    assert state.previous_window_admitted == 100


def test_cold_start_uses_bootstrap_floor():
    decision, state = admit_growth(0, RateWindowState(), growth(1.2))
    assert decision.admitted
    assert state.current_cap == 12


def test_skipped_windows_reset_previous_count():
    state = RateWindowState(0, 100, 0, 120)
    _, state = admit_growth(3500, state, growth(1.2))
    assert state.window_start == 3000
    assert state.previous_window_admitted == 0
    assert state.current_cap == 12


def test_doubling_offered_load_is_bounded_window_by_window():
    rule, state = growth(1.2), RateWindowState()
    previous = 0
    for w in range(8):
        offered = 10 * 2 ** w
        admitted = 0
        for i in range(offered):
            decision, state = admit_growth(w * 1000 + (i * 1000) // offered, state, rule)
            admitted += decision.admitted
        assert admitted <= ceil_scaled(max(previous, 10), 1.2)
        previous = admitted


# --- Adaptive cap ---

def test_slow_downstream_halves_cap():
    state = adapt_rate_cap(RateWindowState(current_cap=100), 900, 300, 100)
    assert state.current_cap == 50


def test_fast_downstream_never_exceeds_configured_cap():
    state = adapt_rate_cap(RateWindowState(current_cap=100), 100, 300, 100)
    assert state.current_cap == 100


def test_cap_never_drops_below_one():
    state = RateWindowState(current_cap=1)
    for _ in range(5):
        state = adapt_rate_cap(state, 1000, 1, 100)
    assert state.current_cap == 1


def test_alternating_latency_matches_replayed_rule():
    state, expected = RateWindowState(current_cap=64), 64
    for step in range(40):
        latency = 900 if step % 3 == 0 else 100
        state = adapt_rate_cap(state, latency, 300, 64)
        expected = max(1, expected // 2) if latency > 300 else min(64, expected + 1)
        assert state.current_cap == expected


def test_negative_latency_is_rejected():
    with pytest.raises(ValueError):
        adapt_rate_cap(RateWindowState(), -1, 300, 100)


# --- FuseEngine ---

def test_engine_logs_and_publishes_every_decision():
    bus, log, seen = EventBus(), LineLog(), []
    bus.subscribe("fuse:decision", seen.append)
    engine = FuseEngine([SIZE_1K, rate(1)], bus, log)
    engine.check(b"ok", now=1000)
    engine.check(b"ok", now=1001)
    engine.check(b"x" * 2000, now=1002)
    assert [d.verdict for d in seen] == [Verdict.ADMIT, Verdict.SHED, Verdict.REJECT]
    assert log.get_lines() == ["1000 Admit - -", "1001 Shed rate 1", "1002 Reject size 0"]


def test_rejected_body_never_consumes_rate_budget():
    engine = FuseEngine([SIZE_1K, rate(1)])
    engine.check(b"x" * 2000, now=0)
    assert engine.check(b"ok", now=1).admitted


def test_growth_shed_does_not_count_against_rate_window():
    engine = FuseEngine([rate(100), growth(1.2)])
    decisions = [engine.check(b"", now=i) for i in range(20)]
    assert sum(d.admitted for d in decisions) == 12
    assert decisions[-1] == Decision.shed("growth", 1)
    assert engine.state_of(0).admitted_in_window == 12


def test_engine_holds_window_when_clock_regresses():
    engine = FuseEngine([rate(1)])
    assert engine.check(b"", now=10_000).admitted
    assert not engine.check(b"", now=9_000).admitted


def test_feedback_adapts_only_rules_with_a_target():
    engine = FuseEngine([rate(100, target=300), SIZE_1K, growth(1.5)])
    engine.feedback(900)
    assert engine.state_of(0).current_cap == 50
    assert engine.state_of(2).current_cap is None
    engine.reset()
    assert engine.state_of(0) == RateWindowState()


def test_halving_mid_window_keeps_admitted_within_cap():
    state = adapt_rate_cap(RateWindowState(0, 100, 0, 100), 900, 300, 100)
    assert state.admitted_in_window <= state.current_cap
    assert state.adapted_cap == 50
    decision, state = admit_rate(10, state, rate(100))
    assert not decision.admitted
    _, state = admit_rate(1000, state, rate(100))
    assert state.current_cap == 50


feedback_steps = st.lists(st.one_of(st.integers(0, 2500).map(lambda dt: ("check", dt)),
                                    st.sampled_from([("feedback", 100), ("feedback", 900)])),
                          max_size=200)


@given(feedback_steps)
def test_admitted_never_exceeds_cap_under_feedback(steps):
    engine = FuseEngine([rate(20, target=300)])
    now = 0
    for action, arg in steps:
        if action == "check":
            now += arg // 10
            engine.check(b"", now=now)
        else:
            engine.feedback(arg)
        state = engine.state_of(0)
        if state.current_cap is not None:
            assert state.admitted_in_window <= state.current_cap
