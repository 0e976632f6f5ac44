# output_guard.py
"""
Output guards: orthogonal checks on upstream responses, optionally sampled,
and the counting policy that turns repeated violations into a fail-stop
action for the upstream.
"""
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from invariant_model import OutputRule, SamplingPolicy, FailStopPolicy
from utils import parse_int_list

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class GuardOutcome(str, Enum):
    PASS = "Pass"
    VIOLATION = "Violation"
    SKIPPED = "Skipped"


class FailStopAction(str, Enum):
    NONE = "none"
    SUSPEND = "suspend"
    STOP = "stop"


@dataclass(frozen=True)
class GuardVerdict:
    outcome: GuardOutcome
    rule_id: int | None = None
    detail: str | None = None

    @property
    def is_violation(self) -> bool:
        return self.outcome is GuardOutcome.VIOLATION

    def log_line(self, unix_ms: int) -> str:
        rule = "-" if self.rule_id is None else str(self.rule_id)
        return f"{unix_ms} {self.outcome.value} {rule} {self.detail or '-'}"


PASS = GuardVerdict(GuardOutcome.PASS)
SKIPPED = GuardVerdict(GuardOutcome.SKIPPED, detail="sampler")


def mix64(z: int) -> int:
    """SplitMix64 output function."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_value(seed: int, counter: int) -> float:
    """Pseudo-random value in [0, 1) for the counter-th response; pinned, see tests for vectors."""
    z = mix64((seed + (counter + 1) * GOLDEN_GAMMA) & MASK64)
    return (z >> 11) / float(1 << 53)


def should_sample(policy: SamplingPolicy, counter: int) -> bool:
    return sample_value(policy.rng_seed, counter) < policy.probability


def _echo_value(request_body: bytes, field_name: str) -> str | None:
    """Returns the text the response must contain, '' if the field is missing, None if unparseable."""
    try:
        doc = json.loads(request_body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    if not isinstance(doc, dict):
        return None
    if field_name not in doc:
        return ""
    value = doc[field_name]
    return value if isinstance(value, str) else json.dumps(value, separators=(",", ":"))


def evaluate_output(request: bytes, status: int, response: bytes,
                    rules: Sequence[OutputRule]) -> GuardVerdict:
    """
    Pass iff every rule passes; otherwise the first failing rule in
    declaration order. Pure: the response bytes are never touched.
    """
    for rule_id, rule in enumerate(rules):
        if rule.kind == "max_size_bytes":
            if len(response) > rule.value:
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "size")
        elif rule.kind == "charset_ascii":
            if not response.isascii():
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "charset")
        elif rule.kind == "status_in_set":
            if status not in rule.value:
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "status")
        elif rule.kind == "echo_field":
            expected = _echo_value(request, rule.value)
            if expected is None:
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "parse")
            if not expected or expected.encode("utf-8") not in response:
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "echo")
        elif rule.kind == "sorted_permutation":
            given = parse_int_list(request)
            produced = parse_int_list(response)
            if given is None or produced is None:
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "parse")
            if Counter(given) != Counter(produced):
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "permutation")
            if any(a > b for a, b in zip(produced, produced[1:])):
                return GuardVerdict(GuardOutcome.VIOLATION, rule_id, "order")
    return PASS


def guard_response(request: bytes, status: int, response: bytes, rules: Sequence[OutputRule],
                   policy: SamplingPolicy, counter: int) -> GuardVerdict:
    """Sampling in front of evaluate_output. Skipped only when the sampler declined."""
    if not rules:
        return PASS
    if policy.probability < 1.0 and not should_sample(policy, counter):
        return SKIPPED
    return evaluate_output(request, status, response, rules)


def coerce_failstop(verdict: GuardVerdict, policy: FailStopPolicy, history: Sequence[int],
                    now: int) -> tuple[FailStopAction, tuple[int, ...]]:
    """
    Appends a violation to the history and emits policy.action once the
    violations with now - t < violation_window_ms reach violation_limit.
    The violating response itself is always replaced by the caller.
    """
    if not verdict.is_violation:
        return FailStopAction.NONE, tuple(history)

    window = tuple(t for t in history if now - t < policy.violation_window_ms) + (now,)
    if len(window) >= policy.violation_limit:
        return FailStopAction(policy.action), window
    return FailStopAction.NONE, window
