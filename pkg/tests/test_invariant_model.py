import json

import pytest
from hypothesis import given, strategies as st

from errors import ConfigError, EmptySummaryError, SpecViolationError
from fuse_engine import FuseEngine
from invariant_model import (ADVISORY_HEADER, InputRule, InvariantSpec, TrafficSummary, format_traffic_record,
                             parse_config, parse_traffic_log, serialize_config, suggest_fuses,
                             summarize_traffic, validate_spec)


def config(**sections) -> str:
    doc = {"input": [{"kind": "max_size_bytes", "value": 1024}]}
    doc.update(sections)
    return json.dumps(doc)


def test_defaults_are_filled_in():
    spec = parse_config(config())
    assert spec.resource_rules.request_ttl_ms == 5000
    assert spec.resource_rules.watchdog_ms == 10000
    assert spec.sampling.probability == 1.0
    assert spec.failstop.action == "suspend"
    assert spec.failstop.violation_limit == 3


def test_growth_factor_must_exceed_one():
    with pytest.raises(SpecViolationError) as exc:
        parse_config(config(input=[{"kind": "max_growth_factor", "value": 0.9, "window_ms": 1000}]))
    assert any("max_growth_factor must exceed 1.0" in v for v in exc.value.violations)


def test_ttl_longer_than_watchdog_is_rejected():
    with pytest.raises(SpecViolationError) as exc:
        parse_config(config(resource={"request_ttl_ms": 500, "watchdog_ms": 200}))
    assert any("request_ttl_ms ≤ watchdog_ms" in v for v in exc.value.violations)


def test_probability_outside_unit_interval_is_rejected():
    with pytest.raises(SpecViolationError) as exc:
        parse_config(config(sampling={"probability": 1.5}))
    assert any(v.startswith("sampling.probability") for v in exc.value.violations)


def test_every_violation_is_reported_at_once():
    with pytest.raises(SpecViolationError) as exc:
        parse_config(config(resource={"request_ttl_ms": 500, "watchdog_ms": 200},
                            sampling={"probability": -0.1},
                            failstop={"violation_limit": 0}))
    assert len(exc.value.violations) == 3


def test_syntax_error_carries_position():
    with pytest.raises(ConfigError) as exc:
        parse_config('{\n  "input": [,]\n}')
    assert exc.value.line == 2
    assert exc.value.column is not None


@pytest.mark.parametrize("doc", [
    {"input": [{"kind": "max_latency"}]},
    {"input": [{"kind": "charset_ascii"}, {"kind": "charset_ascii"}]},
    {"input": [{"kind": "max_size_bytes", "value": "big"}]},
    {"input": [{"kind": "max_size_bytes", "value": 1, "window_ms": 10}]},
    {"input": [], "output": [{"kind": "sorted_permutation", "value": 1}]},
    {"input": [{"kind": "charset_ascii"}], "surprise": 1},
])
def test_structural_errors_are_config_errors(doc):
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc))


def test_spec_needs_at_least_one_rule():
    with pytest.raises(SpecViolationError):
        parse_config("{}")


def test_forbidden_sequences_may_repeat():
    spec = parse_config(json.dumps({"input": [
        {"kind": "forbidden_byte_sequence", "value": "\u0000"},
        {"kind": "forbidden_byte_sequence", "value": "DROP"},
    ]}))
    assert [r.value for r in spec.input_rules] == [b"\x00", b"DROP"]


def test_serialization_is_canonical_and_stable():
    text = json.dumps({
        "output": [{"kind": "status_in_set", "value": [404, 200, 200]}, {"kind": "sorted_permutation"}],
        "input": [{"kind": "max_rate_per_window", "value": 100, "target_latency_ms": 300}],
        "comment": "sorter",
    })
    once = serialize_config(parse_config(text))
    assert serialize_config(parse_config(once)) == once
    doc = json.loads(once)
    assert doc["output"][0]["value"] == [200, 404]
    assert doc["input"][0]["window_ms"] == 1000
    assert b" " not in once.replace(b"sorter", b"")


rule_docs = st.one_of(
    st.builds(lambda v: {"kind": "max_size_bytes", "value": v}, st.integers(1, 10**9)),
    st.just({"kind": "charset_ascii"}),
    st.builds(lambda v, w: {"kind": "max_rate_per_window", "value": v, "window_ms": w},
              st.integers(1, 10**6), st.integers(10, 60000)),
    st.builds(lambda v, w: {"kind": "max_growth_factor", "value": v, "window_ms": w},
              st.floats(1.01, 10.0), st.integers(10, 60000)),
    st.builds(lambda v: {"kind": "forbidden_byte_sequence", "value": v},
              st.text(st.characters(max_codepoint=255), min_size=1, max_size=8)),
)

output_docs = st.one_of(
    st.builds(lambda v: {"kind": "max_size_bytes", "value": v}, st.integers(1, 10**9)),
    st.just({"kind": "charset_ascii"}),
    st.just({"kind": "sorted_permutation"}),
    st.builds(lambda v: {"kind": "status_in_set", "value": v}, st.lists(st.integers(100, 599), min_size=1)),
    st.builds(lambda v: {"kind": "echo_field", "value": v}, st.text(min_size=1, max_size=10)),
)

failstop_docs = st.fixed_dictionaries({
    "action": st.sampled_from(["suspend", "stop"]),
    "violation_limit": st.integers(1, 100),
    "violation_window_ms": st.integers(1, 10**6),
    "reboot_delay_ms": st.integers(0, 10**6),
    "reboot_jitter_ms": st.integers(0, 10**4),
})


@given(st.lists(rule_docs, min_size=1, max_size=4, unique_by=lambda d: d["kind"]),
       st.lists(output_docs, max_size=3, unique_by=lambda d: d["kind"]),
       failstop_docs, st.floats(0.0, 1.0), st.integers(0, 2**32))
def test_serialize_parse_is_a_fixpoint(inputs, outputs, failstop, probability, seed):
    text = json.dumps({"input": inputs, "output": outputs, "failstop": failstop,
                       "sampling": {"probability": probability, "rng_seed": seed}})
    canonical = serialize_config(parse_config(text))
    assert serialize_config(parse_config(canonical)) == canonical


def test_validate_spec_on_programmatic_spec():
    assert validate_spec(InvariantSpec.default()) == []
    bad = InvariantSpec(input_rules=(InputRule("max_growth_factor", 1.0, window_ms=5),))
    problems = validate_spec(bad)
    assert len(problems) == 2


# --- Learn mode ---

def test_suggest_applies_slack():
    summary = TrafficSummary(observed_min_size=3, observed_max_size=900, observed_charset=frozenset(b"0123,"),
                             observed_peak_rate=100, sample_count=500)
    draft = suggest_fuses(summary, 1.2)
    assert draft.input_rule("max_size_bytes").value == 1080
    assert draft.input_rule("max_rate_per_window").value == 120
    assert draft.input_rule("charset_ascii") is not None
    assert draft.comment == ADVISORY_HEADER.format(count=500)
    assert validate_spec(draft) == []


def test_suggest_leaves_out_charset_for_binary_traffic():
    summary = TrafficSummary(observed_max_size=10, observed_charset=frozenset({0xFF}),
                             observed_peak_rate=5, sample_count=1)
    assert suggest_fuses(summary).input_rule("charset_ascii") is None


def test_suggest_refuses_empty_summary_and_small_slack():
    with pytest.raises(EmptySummaryError):
        suggest_fuses(TrafficSummary())
    with pytest.raises(ValueError):
        suggest_fuses(TrafficSummary(sample_count=1), 0.5)


def test_traffic_log_round_trip_and_peak_rate():
    lines = [format_traffic_record(1000 + i * 10, b"1,2,3") for i in range(150)]
    lines.append(format_traffic_record(5000, b""))
    lines.append("garbage")
    records = parse_traffic_log(lines)
    assert len(records) == 151
    assert records[-1] == (5000, b"")

    summary = summarize_traffic(records, 1000)
    assert summary.observed_peak_rate == 100
    assert summary.observed_max_size == 5
    assert summary.observed_min_size == 0
    assert summary.sample_count == 151


@pytest.mark.parametrize("literal", ["NaN", "Infinity", "-Infinity"])
def test_non_finite_numbers_are_refused(literal):
    text = '{"input": [{"kind": "max_growth_factor", "value": %s, "window_ms": 1000}]}' % literal
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("value", [float("nan"), float("inf"), float("-inf")])
def test_validate_flags_non_finite_growth_factor(value):
    spec = InvariantSpec(input_rules=(InputRule("max_growth_factor", value, window_ms=1000),))
    assert any("max_growth_factor" in v for v in validate_spec(spec))


def test_suggest_refuses_non_finite_slack():
    with pytest.raises(ValueError):
        suggest_fuses(TrafficSummary(sample_count=1, observed_max_size=1), float("nan"))


traffic = st.lists(st.tuples(st.integers(0, 20_000), st.binary(max_size=64)), min_size=1, max_size=200)


@given(traffic, st.floats(1.0, 3.0))
def test_suggested_fuses_admit_the_traffic_they_were_drawn_from(records, slack):
    draft = suggest_fuses(summarize_traffic(records), slack)
    engine = FuseEngine(draft.input_rules)
    for ts, body in sorted(records, key=lambda r: r[0]):
        assert engine.check(body, now=ts).admitted


@given(traffic, st.floats(1.0, 3.0), st.floats(0.0, 2.0))
def test_more_slack_never_tightens_a_cap(records, slack, extra):
    summary = summarize_traffic(records)
    tight, loose = suggest_fuses(summary, slack), suggest_fuses(summary, slack + extra)
    for kind in ("max_size_bytes", "max_rate_per_window"):
        assert loose.input_rule(kind).value >= tight.input_rule(kind).value
    assert (loose.input_rule("charset_ascii") is None) == (tight.input_rule("charset_ascii") is None)
