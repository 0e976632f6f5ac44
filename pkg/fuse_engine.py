# fuse_engine.py
"""
Software fuses: per-request input checks. Static rules look at the body only;
dynamic rules do admission control over tumbling windows, either with an
absolute cap (optionally adapted by downstream latency) or with a cap on how
fast the admitted rate may grow from one window to the next.
"""
import math
import threading
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Sequence

from errors import ClockRegressionError
from events import EventBus
from invariant_model import InputRule, WINDOWED_INPUT_KINDS
from utils import LineLog, ceil_scaled, now_ms

BOOTSTRAP_FLOOR = 10


class Verdict(str, Enum):
    ADMIT = "Admit"
    REJECT = "Reject"
    SHED = "Shed"
    SQUASH = "Squash"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: str | None = None
    rule_id: int | None = None

    def __post_init__(self):
        if self.verdict is Verdict.ADMIT:
            if self.reason is not None or self.rule_id is not None:
                raise ValueError("Admit carries no reason or rule_id")
        elif self.reason is None or self.rule_id is None:
            raise ValueError(f"{self.verdict.value} needs a reason and a rule_id")

    @classmethod
    def admit(cls) -> "Decision":
        return cls(Verdict.ADMIT)

    @classmethod
    def reject(cls, reason: str, rule_id: int) -> "Decision":
        return cls(Verdict.REJECT, reason, rule_id)

    @classmethod
    def shed(cls, reason: str, rule_id: int) -> "Decision":
        return cls(Verdict.SHED, reason, rule_id)

    @classmethod
    def squash(cls, reason: str = "ttl", rule_id: int = 0) -> "Decision":
        # rule_id 0 names the single resource rule.
        return cls(Verdict.SQUASH, reason, rule_id)

    @property
    def admitted(self) -> bool:
        return self.verdict is Verdict.ADMIT

    def log_line(self, unix_ms: int) -> str:
        rule = "-" if self.rule_id is None else str(self.rule_id)
        return f"{unix_ms} {self.verdict.value} {self.reason or '-'} {rule}"


@dataclass(frozen=True)
class RateWindowState:
    window_start: int | None = None
    admitted_in_window: int = 0
    previous_window_admitted: int = 0
    current_cap: int | None = None
    # Latency-adapted cap; current_cap never drops below admitted_in_window mid-window.
    adapted_cap: int | None = None


# --- Static rules ---

def evaluate_static(body: bytes, rules: Sequence[InputRule]) -> Decision:
    """
    Admit iff every static rule passes; otherwise Reject naming the first
    failing rule in declaration order. Rate and growth rules are skipped so
    rule ids stay aligned with the config's input list.
    """
    for rule_id, rule in enumerate(rules):
        if rule.kind == "max_size_bytes":
            if len(body) > rule.value:
                return Decision.reject("size", rule_id)
        elif rule.kind == "charset_ascii":
            if not body.isascii():
                return Decision.reject("charset", rule_id)
        elif rule.kind == "forbidden_byte_sequence":
            if rule.value in body:
                return Decision.reject("forbidden", rule_id)
    return Decision.admit()


# --- Windowed admission ---

def _roll(state: RateWindowState, now: int, window_ms: int,
          cap_for_window: Callable[[int], int]) -> RateWindowState:
    if state.window_start is None:
        return RateWindowState(now, 0, 0, cap_for_window(0), state.adapted_cap)
    if now < state.window_start:
        raise ClockRegressionError(f"now={now} precedes window_start={state.window_start}")

    windows_passed = (now - state.window_start) // window_ms
    if windows_passed == 0:
        return state
    # Windows skipped entirely admitted nothing.
    previous = state.admitted_in_window if windows_passed == 1 else 0
    return RateWindowState(state.window_start + windows_passed * window_ms, 0, previous,
                           cap_for_window(previous), state.adapted_cap)


def _rate_cap_fn(state: RateWindowState, rule: InputRule) -> Callable[[int], int]:
    base = state.adapted_cap if state.adapted_cap is not None else state.current_cap
    effective = rule.value if base is None else min(base, rule.value)
    return lambda _previous: effective


def _growth_cap_fn(rule: InputRule, bootstrap_floor: int) -> Callable[[int], int]:
    return lambda previous: ceil_scaled(max(previous, bootstrap_floor), rule.value)


def _roll_rule(state: RateWindowState, now: int, rule: InputRule, bootstrap_floor: int) -> RateWindowState:
    if rule.kind == "max_rate_per_window":
        return _roll(state, now, rule.window_ms, _rate_cap_fn(state, rule))
    return _roll(state, now, rule.window_ms, _growth_cap_fn(rule, bootstrap_floor))


def _admit_windowed(now: int, state: RateWindowState, rule: InputRule, reason: str,
                    rule_id: int, bootstrap_floor: int) -> tuple[Decision, RateWindowState]:
    rolled = _roll_rule(state, now, rule, bootstrap_floor)
    if rolled.admitted_in_window < rolled.current_cap:
        return Decision.admit(), replace(rolled, admitted_in_window=rolled.admitted_in_window + 1)
    return Decision.shed(reason, rule_id), rolled


def admit_rate(now: int, state: RateWindowState, rule: InputRule,
               rule_id: int = 0) -> tuple[Decision, RateWindowState]:
    """Absolute cap per tumbling window. Raises ClockRegressionError if now < window_start."""
    if rule.kind != "max_rate_per_window":
        raise ValueError(f"admit_rate needs a max_rate_per_window rule, got {rule.kind}")
    return _admit_windowed(now, state, rule, "rate", rule_id, BOOTSTRAP_FLOOR)


def admit_growth(now: int, state: RateWindowState, rule: InputRule, rule_id: int = 0,
                 bootstrap_floor: int = BOOTSTRAP_FLOOR) -> tuple[Decision, RateWindowState]:
    """Cap = ceil(g * max(previous_window_admitted, bootstrap_floor))."""
    if rule.kind != "max_growth_factor":
        raise ValueError(f"admit_growth needs a max_growth_factor rule, got {rule.kind}")
    return _admit_windowed(now, state, rule, "growth", rule_id, bootstrap_floor)


def adapt_rate_cap(state: RateWindowState, downstream_latency_ms: float,
                   target_latency_ms: float, max_cap: int) -> RateWindowState:
    """
    Multiplicative decrease (x0.5, floor 1) when latency exceeds the target,
    additive increase (+1) otherwise, never above max_cap. A decrease below
    what the open window already admitted takes full effect at the next
    window; until then the window admits nothing more.
    """
    if downstream_latency_ms < 0 or target_latency_ms < 0:
        raise ValueError("latencies must be >= 0")
    base = state.adapted_cap if state.adapted_cap is not None else state.current_cap
    cap = max_cap if base is None else base
    if downstream_latency_ms > target_latency_ms:
        cap = max(1, math.floor(cap * 0.5))
    else:
        cap += 1
    cap = min(cap, max_cap)
    return replace(state, adapted_cap=cap, current_cap=max(cap, state.admitted_in_window))


class FuseEngine:
    """
    Owns the window states of one upstream. All admissions for that upstream
    are serialized through check().
    """

    def __init__(self, rules: Sequence[InputRule], event_bus: EventBus | None = None,
                 decision_log: LineLog | None = None, bootstrap_floor: int = BOOTSTRAP_FLOOR):
        self.rules = tuple(rules)
        self.event_bus = event_bus
        self.decision_log = decision_log
        self.bootstrap_floor = bootstrap_floor
        windowed = [(i, r) for i, r in enumerate(self.rules) if r.kind in WINDOWED_INPUT_KINDS]
        # Rate fuses run before growth fuses.
        self._dynamic = sorted(windowed, key=lambda item: item[1].kind != "max_rate_per_window")
        self._states: dict[int, RateWindowState] = {i: RateWindowState() for i, _ in self._dynamic}
        self._lock = threading.Lock()

    def check(self, body: bytes, now: int | None = None) -> Decision:
        now = now_ms() if now is None else now
        decision = evaluate_static(body, self.rules)
        if decision.admitted and self._dynamic:
            decision = self._admit_dynamic(now)
        self.record(decision, now)
        return decision

    def _admit_dynamic(self, now: int) -> Decision:
        with self._lock:
            rolled = {}
            for rule_id, rule in self._dynamic:
                state = self._states[rule_id]
                if state.window_start is not None and now < state.window_start:
                    logging.debug(f"Clock regressed {state.window_start - now} ms; holding window.")
                    now = state.window_start
                rolled[rule_id] = _roll_rule(state, now, rule, self.bootstrap_floor)

            # Nothing is counted unless every dynamic fuse admits.
            for rule_id, rule in self._dynamic:
                state = rolled[rule_id]
                if state.admitted_in_window >= state.current_cap:
                    self._states.update(rolled)
                    reason = "rate" if rule.kind == "max_rate_per_window" else "growth"
                    return Decision.shed(reason, rule_id)

            for rule_id, state in rolled.items():
                self._states[rule_id] = replace(state, admitted_in_window=state.admitted_in_window + 1)
            return Decision.admit()

    def record(self, decision: Decision, now: int | None = None):
        now = now_ms() if now is None else now
        if self.decision_log:
            self.decision_log.append(decision.log_line(now))
        if self.event_bus:
            self.event_bus.publish("fuse:decision", decision)

    def feedback(self, latency_ms: float):
        """Adaptive hook: feeds downstream latency to every rate fuse that declares a target."""
        with self._lock:
            for rule_id, rule in self._dynamic:
                if rule.kind == "max_rate_per_window" and rule.target_latency_ms is not None:
                    self._states[rule_id] = adapt_rate_cap(self._states[rule_id], latency_ms,
                                                           rule.target_latency_ms, rule.value)

    def state_of(self, rule_id: int) -> RateWindowState:
        with self._lock:
            return self._states[rule_id]

    def reset(self):
        with self._lock:
            self._states = {i: RateWindowState() for i, _ in self._dynamic}
