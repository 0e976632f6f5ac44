# invariant_model.py
"""
Declarative invariant schema: input rules feed the fuse engine, resource rules
the resource cop, output rules and sampling the output guard, and the
fail-stop policy the interposer's state machine.

Configs are JSON documents with a fixed schema. serialize_config produces the
canonical form (sorted keys, no insignificant whitespace, every field
explicit), so serialize_config(parse_config(c)) is stable for any accepted c.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from errors import ConfigError, SpecViolationError, EmptySummaryError
from utils import ceil_scaled

INPUT_KINDS = ("max_size_bytes", "charset_ascii", "forbidden_byte_sequence",
               "max_rate_per_window", "max_growth_factor")
STATIC_INPUT_KINDS = frozenset({"max_size_bytes", "charset_ascii", "forbidden_byte_sequence"})
WINDOWED_INPUT_KINDS = frozenset({"max_rate_per_window", "max_growth_factor"})
REPEATABLE_INPUT_KINDS = frozenset({"forbidden_byte_sequence"})

OUTPUT_KINDS = ("max_size_bytes", "charset_ascii", "status_in_set", "echo_field", "sorted_permutation")
REPEATABLE_OUTPUT_KINDS = frozenset({"echo_field"})
VALUELESS_KINDS = frozenset({"charset_ascii", "sorted_permutation"})

FAILSTOP_ACTIONS = ("suspend", "stop")

DEFAULT_WINDOW_MS = 1000
DEFAULT_GROWTH_FACTOR = 1.2
DEFAULT_SLACK = 1.2
MIN_WINDOW_MS = 10

ADVISORY_HEADER = "ADVISORY DRAFT: fuses suggested from {count} observed requests; review before enforcing."


@dataclass(frozen=True)
class InputRule:
    kind: str
    value: Any = None
    window_ms: int | None = None
    target_latency_ms: int | None = None

    @property
    def is_static(self) -> bool:
        return self.kind in STATIC_INPUT_KINDS


@dataclass(frozen=True)
class ResourceRule:
    request_ttl_ms: int = 5000
    watchdog_ms: int = 10000
    memory_budget_bytes: int = 8_000_000
    lease_duration_ms: int = 30000
    reboot_margin: float = 0.1


@dataclass(frozen=True)
class OutputRule:
    kind: str
    value: Any = None


@dataclass(frozen=True)
class SamplingPolicy:
    probability: float = 1.0
    rng_seed: int = 0


@dataclass(frozen=True)
class FailStopPolicy:
    action: str = "suspend"
    violation_limit: int = 3
    violation_window_ms: int = 10000
    reboot_delay_ms: int = 1000
    reboot_jitter_ms: int = 0


@dataclass(frozen=True)
class InvariantSpec:
    input_rules: tuple[InputRule, ...] = ()
    resource_rules: ResourceRule = field(default_factory=ResourceRule)
    output_rules: tuple[OutputRule, ...] = ()
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    failstop: FailStopPolicy = field(default_factory=FailStopPolicy)
    comment: str | None = None

    @classmethod
    def default(cls) -> "InvariantSpec":
        """A permissive but valid spec: a 1 MiB request cap and nothing else."""
        return cls(input_rules=(InputRule("max_size_bytes", 1024 * 1024),))

    def input_rule(self, kind: str) -> InputRule | None:
        return next((r for r in self.input_rules if r.kind == kind), None)

    def output_rule(self, kind: str) -> OutputRule | None:
        return next((r for r in self.output_rules if r.kind == kind), None)


@dataclass(frozen=True)
class TrafficSummary:
    observed_min_size: int = 0
    observed_max_size: int = 0
    observed_charset: frozenset = frozenset()
    observed_peak_rate: int = 0
    sample_count: int = 0
    window_ms: int = DEFAULT_WINDOW_MS


# --- Parsing ---

def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return _is_int(value) or (isinstance(value, float) and math.isfinite(value))


def _expect_object(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    return obj


def _reject_unknown_keys(obj: dict, allowed: Iterable[str], where: str):
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _get_int(obj: dict, key: str, where: str, default: int | None = None) -> int:
    if key not in obj:
        if default is None:
            raise ConfigError(f"{where}.{key} is required")
        return default
    value = obj[key]
    if not _is_int(value):
        raise ConfigError(f"{where}.{key} must be an integer")
    return value


def _get_float(obj: dict, key: str, where: str, default: float) -> float:
    value = obj.get(key, default)
    if not _is_number(value):
        raise ConfigError(f"{where}.{key} must be a number")
    return float(value)


def _parse_input_rule(obj, where: str) -> InputRule:
    obj = _expect_object(obj, where)
    kind = obj.get("kind")
    if kind not in INPUT_KINDS:
        raise ConfigError(f"{where}: unknown input rule kind '{kind}'")

    allowed = {"kind", "value"}
    if kind in WINDOWED_INPUT_KINDS:
        allowed.add("window_ms")
    if kind == "max_rate_per_window":
        allowed.add("target_latency_ms")
    _reject_unknown_keys(obj, allowed, where)

    value = obj.get("value")
    if kind in VALUELESS_KINDS:
        if value is not None:
            raise ConfigError(f"{where}: {kind} takes no value")
        return InputRule(kind)

    if kind == "forbidden_byte_sequence":
        if not isinstance(value, str):
            raise ConfigError(f"{where}.value must be a string")
        try:
            return InputRule(kind, value.encode("latin-1"))
        except UnicodeEncodeError:
            raise ConfigError(f"{where}.value must only contain code points 0-255")

    if kind == "max_growth_factor":
        return InputRule(kind, _get_float(obj, "value", where, DEFAULT_GROWTH_FACTOR),
                         window_ms=_get_int(obj, "window_ms", where, DEFAULT_WINDOW_MS))

    rule_value = _get_int(obj, "value", where)
    if kind == "max_rate_per_window":
        target = obj.get("target_latency_ms")
        if target is not None and not _is_int(target):
            raise ConfigError(f"{where}.target_latency_ms must be an integer")
        return InputRule(kind, rule_value, window_ms=_get_int(obj, "window_ms", where, DEFAULT_WINDOW_MS),
                         target_latency_ms=target)
    return InputRule(kind, rule_value)


def _parse_output_rule(obj, where: str) -> OutputRule:
    obj = _expect_object(obj, where)
    kind = obj.get("kind")
    if kind not in OUTPUT_KINDS:
        raise ConfigError(f"{where}: unknown output rule kind '{kind}'")
    _reject_unknown_keys(obj, {"kind", "value"}, where)

    value = obj.get("value")
    if kind in VALUELESS_KINDS:
        if value is not None:
            raise ConfigError(f"{where}: {kind} takes no value")
        return OutputRule(kind)
    if kind == "status_in_set":
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            raise ConfigError(f"{where}.value must be a list of integers")
        return OutputRule(kind, tuple(sorted(set(value))))
    if kind == "echo_field":
        if not isinstance(value, str):
            raise ConfigError(f"{where}.value must be a string")
        return OutputRule(kind, value)
    return OutputRule(kind, _get_int(obj, "value", where))


def _check_singletons(kinds: list[str], repeatable: frozenset, section: str):
    seen = set()
    for i, kind in enumerate(kinds):
        if kind in seen and kind not in repeatable:
            raise ConfigError(f"{section}[{i}]: duplicate rule of singleton kind '{kind}'")
        seen.add(kind)


def _reject_constant(name: str):
    raise ConfigError(f"non-finite number {name} is not allowed")


def parse_config(text: bytes | str) -> InvariantSpec:
    """
    Parses a JSON invariant config, applying defaults for omitted optional
    fields.

    Raises:
        ConfigError: syntax error (with line/column), unknown rule kind,
            duplicate singleton rule or a mistyped field.
        SpecViolationError: the config parsed but breaks an invariant.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"config is not valid UTF-8: {e.reason}")
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ConfigError(f"syntax error: {e.msg}", e.lineno, e.colno)

    doc = _expect_object(doc, "config")
    _reject_unknown_keys(doc, {"input", "resource", "output", "sampling", "failstop", "comment"}, "config")

    raw_inputs = doc.get("input", [])
    raw_outputs = doc.get("output", [])
    if not isinstance(raw_inputs, list):
        raise ConfigError("input must be a JSON array")
    if not isinstance(raw_outputs, list):
        raise ConfigError("output must be a JSON array")

    input_rules = tuple(_parse_input_rule(r, f"input[{i}]") for i, r in enumerate(raw_inputs))
    output_rules = tuple(_parse_output_rule(r, f"output[{i}]") for i, r in enumerate(raw_outputs))
    _check_singletons([r.kind for r in input_rules], REPEATABLE_INPUT_KINDS, "input")
    _check_singletons([r.kind for r in output_rules], REPEATABLE_OUTPUT_KINDS, "output")

    res = _expect_object(doc.get("resource", {}), "resource")
    _reject_unknown_keys(res, ResourceRule.__dataclass_fields__, "resource")
    d = ResourceRule()
    resource_rules = ResourceRule(
        request_ttl_ms=_get_int(res, "request_ttl_ms", "resource", d.request_ttl_ms),
        watchdog_ms=_get_int(res, "watchdog_ms", "resource", d.watchdog_ms),
        memory_budget_bytes=_get_int(res, "memory_budget_bytes", "resource", d.memory_budget_bytes),
        lease_duration_ms=_get_int(res, "lease_duration_ms", "resource", d.lease_duration_ms),
        reboot_margin=_get_float(res, "reboot_margin", "resource", d.reboot_margin),
    )

    smp = _expect_object(doc.get("sampling", {}), "sampling")
    _reject_unknown_keys(smp, SamplingPolicy.__dataclass_fields__, "sampling")
    sampling = SamplingPolicy(
        probability=_get_float(smp, "probability", "sampling", SamplingPolicy.probability),
        rng_seed=_get_int(smp, "rng_seed", "sampling", SamplingPolicy.rng_seed),
    )

    fsp = _expect_object(doc.get("failstop", {}), "failstop")
    _reject_unknown_keys(fsp, FailStopPolicy.__dataclass_fields__, "failstop")
    action = fsp.get("action", FailStopPolicy.action)
    if not isinstance(action, str):
        raise ConfigError("failstop.action must be a string")
    f = FailStopPolicy()
    failstop = FailStopPolicy(
        action=action,
        violation_limit=_get_int(fsp, "violation_limit", "failstop", f.violation_limit),
        violation_window_ms=_get_int(fsp, "violation_window_ms", "failstop", f.violation_window_ms),
        reboot_delay_ms=_get_int(fsp, "reboot_delay_ms", "failstop", f.reboot_delay_ms),
        reboot_jitter_ms=_get_int(fsp, "reboot_jitter_ms", "failstop", f.reboot_jitter_ms),
    )

    comment = doc.get("comment")
    if comment is not None and not isinstance(comment, str):
        raise ConfigError("comment must be a string")

    spec = InvariantSpec(input_rules, resource_rules, output_rules, sampling, failstop, comment)
    violations = validate_spec(spec)
    if violations:
        raise SpecViolationError(violations)
    return spec


# --- Serialization ---

def _input_rule_to_json(rule: InputRule) -> dict:
    obj: dict[str, Any] = {"kind": rule.kind}
    if isinstance(rule.value, bytes):
        obj["value"] = rule.value.decode("latin-1")
    elif rule.value is not None:
        obj["value"] = rule.value
    if rule.kind in WINDOWED_INPUT_KINDS:
        obj["window_ms"] = rule.window_ms
    if rule.target_latency_ms is not None:
        obj["target_latency_ms"] = rule.target_latency_ms
    return obj


def _output_rule_to_json(rule: OutputRule) -> dict:
    obj: dict[str, Any] = {"kind": rule.kind}
    if isinstance(rule.value, (tuple, list, set, frozenset)):
        obj["value"] = sorted(rule.value)
    elif rule.value is not None:
        obj["value"] = rule.value
    return obj


def spec_to_document(spec: InvariantSpec) -> dict:
    r, s, f = spec.resource_rules, spec.sampling, spec.failstop
    doc = {
        "input": [_input_rule_to_json(rule) for rule in spec.input_rules],
        "output": [_output_rule_to_json(rule) for rule in spec.output_rules],
        "resource": {
            "request_ttl_ms": r.request_ttl_ms,
            "watchdog_ms": r.watchdog_ms,
            "memory_budget_bytes": r.memory_budget_bytes,
            "lease_duration_ms": r.lease_duration_ms,
            "reboot_margin": float(r.reboot_margin),
        },
        "sampling": {"probability": float(s.probability), "rng_seed": s.rng_seed},
        "failstop": {
            "action": f.action,
            "violation_limit": f.violation_limit,
            "violation_window_ms": f.violation_window_ms,
            "reboot_delay_ms": f.reboot_delay_ms,
            "reboot_jitter_ms": f.reboot_jitter_ms,
        },
    }
    if spec.comment is not None:
        doc["comment"] = spec.comment
    return doc


def serialize_config(spec: InvariantSpec) -> bytes:
    """Canonical bytes: sorted keys, compact separators, ASCII-only."""
    return json.dumps(spec_to_document(spec), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("ascii")


# --- Validation ---

def _validate_input_rule(rule: InputRule, where: str) -> list[str]:
    v = rule.value
    if rule.kind == "max_size_bytes":
        if not _is_int(v) or v < 1:
            return [f"{where}.value: max_size_bytes must be >= 1"]
    elif rule.kind == "charset_ascii":
        return []
    elif rule.kind == "forbidden_byte_sequence":
        if not isinstance(v, bytes) or not v:
            return [f"{where}.value: forbidden_byte_sequence must be a non-empty byte string"]
    elif rule.kind in WINDOWED_INPUT_KINDS:
        problems = []
        if rule.kind == "max_rate_per_window":
            if not _is_int(v) or v < 1:
                problems.append(f"{where}.value: max_rate_per_window must be >= 1")
            if rule.target_latency_ms is not None and rule.target_latency_ms <= 0:
                problems.append(f"{where}.target_latency_ms: must be > 0")
        elif not _is_number(v) or v <= 1.0:
            problems.append(f"{where}.value: max_growth_factor must exceed 1.0")
        if rule.window_ms is None or rule.window_ms < MIN_WINDOW_MS:
            problems.append(f"{where}.window_ms: window_ms must be >= {MIN_WINDOW_MS}")
        return problems
    else:
        return [f"{where}.kind: unknown input rule kind '{rule.kind}'"]
    return []


def _validate_output_rule(rule: OutputRule, where: str) -> list[str]:
    v = rule.value
    if rule.kind == "status_in_set":
        if not v or not all(_is_int(code) and 100 <= code <= 599 for code in v):
            return [f"{where}.value: status_in_set must be a non-empty set of valid status codes"]
    elif rule.kind == "max_size_bytes":
        if not _is_int(v) or v < 1:
            return [f"{where}.value: max_size_bytes must be >= 1"]
    elif rule.kind == "echo_field":
        if not isinstance(v, str) or not v:
            return [f"{where}.value: echo_field must name a request field"]
    elif rule.kind not in OUTPUT_KINDS:
        return [f"{where}.kind: unknown output rule kind '{rule.kind}'"]
    return []


def _duplicate_violations(kinds: list[str], repeatable: frozenset, section: str) -> list[str]:
    seen, problems = set(), []
    for i, kind in enumerate(kinds):
        if kind in seen and kind not in repeatable:
            problems.append(f"{section}[{i}].kind: duplicate rule of singleton kind '{kind}'")
        seen.add(kind)
    return problems


def validate_spec(spec: InvariantSpec) -> list[str]:
    """
    Returns one description per broken invariant, each naming the field and
    the rule it breaks. An empty list means the invariant set is valid.
    """
    violations = []
    if not spec.input_rules and not spec.output_rules:
        violations.append("spec: at least one input or output rule is required")

    for i, rule in enumerate(spec.input_rules):
        violations += _validate_input_rule(rule, f"input[{i}]")
    violations += _duplicate_violations([r.kind for r in spec.input_rules], REPEATABLE_INPUT_KINDS, "input")

    r = spec.resource_rules
    for name in ("request_ttl_ms", "watchdog_ms", "memory_budget_bytes", "lease_duration_ms"):
        if getattr(r, name) <= 0:
            violations.append(f"resource.{name}: must be > 0")
    if r.request_ttl_ms > r.watchdog_ms:
        violations.append("resource.request_ttl_ms: request_ttl_ms ≤ watchdog_ms")
    if not 0 < r.reboot_margin < 1:
        violations.append("resource.reboot_margin: 0 < reboot_margin < 1")

    for i, rule in enumerate(spec.output_rules):
        violations += _validate_output_rule(rule, f"output[{i}]")
    violations += _duplicate_violations([o.kind for o in spec.output_rules], REPEATABLE_OUTPUT_KINDS, "output")

    if not 0.0 <= spec.sampling.probability <= 1.0:
        violations.append("sampling.probability: must be within [0, 1]")

    f = spec.failstop
    if f.action not in FAILSTOP_ACTIONS:
        violations.append(f"failstop.action: must be one of {', '.join(FAILSTOP_ACTIONS)}")
    if f.violation_limit < 1:
        violations.append("failstop.violation_limit: violation_limit ≥ 1")
    if f.violation_window_ms < 1:
        violations.append("failstop.violation_window_ms: must be > 0")
    if f.reboot_delay_ms < 0:
        violations.append("failstop.reboot_delay_ms: must be >= 0")
    if f.reboot_jitter_ms < 0:
        violations.append("failstop.reboot_jitter_ms: must be >= 0")
    return violations


# --- Learn mode ---

def format_traffic_record(unix_ms: int, body: bytes) -> str:
    return f"{unix_ms} {body.hex() if body else '-'}"


def parse_traffic_log(lines: Iterable[str]) -> list[tuple[int, bytes]]:
    """Reads `<unix_ms> <hex body|->` lines; blank and malformed lines are skipped with a warning."""
    records = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            ts, payload = line.split(" ", 1)
            body = b"" if payload == "-" else bytes.fromhex(payload)
            records.append((int(ts), body))
        except ValueError:
            logging.warning(f"Skipping malformed traffic log line {lineno}")
    return records


def summarize_traffic(records: Iterable[tuple[int, bytes]], window_ms: int = DEFAULT_WINDOW_MS) -> TrafficSummary:
    """
    Summarizes observed requests. The peak rate is counted over tumbling
    windows anchored at the first timestamp, the same anchoring the fuse uses.
    """
    records = sorted(records, key=lambda r: r[0])
    if not records:
        return TrafficSummary(window_ms=window_ms)

    sizes = [len(body) for _, body in records]
    charset = set()
    for _, body in records:
        charset.update(body)

    anchor = records[0][0]
    per_window: dict[int, int] = {}
    for ts, _ in records:
        idx = (ts - anchor) // window_ms
        per_window[idx] = per_window.get(idx, 0) + 1

    return TrafficSummary(
        observed_min_size=min(sizes),
        observed_max_size=max(sizes),
        observed_charset=frozenset(charset),
        observed_peak_rate=max(per_window.values()),
        sample_count=len(records),
        window_ms=window_ms,
    )


def suggest_fuses(summary: TrafficSummary, slack: float = DEFAULT_SLACK) -> InvariantSpec:
    """
    Drafts an input-fuse spec from observed traffic with `slack` headroom.
    The draft carries an advisory comment header in its serialization.
    """
    if summary.sample_count < 1:
        raise EmptySummaryError("traffic summary is empty (sample_count = 0)")
    if not math.isfinite(slack) or slack < 1.0:
        raise ValueError(f"slack must be >= 1.0, got {slack}")

    rules = [InputRule("max_size_bytes", max(1, ceil_scaled(summary.observed_max_size, slack)))]
    if all(b < 0x80 for b in summary.observed_charset):
        rules.append(InputRule("charset_ascii"))
    rules.append(InputRule("max_rate_per_window", max(1, ceil_scaled(summary.observed_peak_rate, slack)),
                           window_ms=summary.window_ms))

    draft = replace(InvariantSpec.default(), input_rules=tuple(rules),
                    comment=ADVISORY_HEADER.format(count=summary.sample_count))
    logging.info(f"Suggested {len(rules)} fuse(s) from {summary.sample_count} requests (slack {slack}).")
    return draft
