# bench.py
"""
Predictability benchmark: drives a workload through the interposer, injects
scheduled faults into the fixture, probes `GET /health` to time every
outage, and condenses repeated trials into a time-to-repair report whose
headline numbers are the spread of recovery times (sample variance, RMS
about a declared target, fraction of outages beyond the patience threshold)
rather than their mean alone.
"""
import json
import math
import time
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
import requests

from errors import ConfigError, EmptySamplesError
from fault_service import FaultMode
from utils import ceil_scaled

SHAPES = ("constant", "step", "exponential")
CENSOR_FACTOR = 10
PROBE_TIMEOUT_S = 1.0
LOAD_TIMEOUT_S = 2.0


@dataclass(frozen=True)
class WorkloadProfile:
    shape: str = "constant"
    base_rate: float = 10.0
    duration_s: float = 10.0
    step_rate: float | None = None
    step_at_s: float | None = None
    doubling_period_s: float | None = None


@dataclass(frozen=True)
class ScheduledFault:
    at_s: float
    mode: FaultMode
    # Size of a body sent straight to the fixture to set the fault off (crash_on_size).
    trigger_body_bytes: int | None = None


@dataclass(frozen=True)
class BenchConfig:
    profile: WorkloadProfile = field(default_factory=WorkloadProfile)
    fault_schedule: tuple[ScheduledFault, ...] = ()
    trials: int = 1
    recovery_target_s: float = 2.0
    patience_threshold_s: float = 8.0
    probe_interval_ms: int = 10
    interposer: str = "127.0.0.1:8080"
    fixture: str = "127.0.0.1:9090"
    load_path: str = "/echo"
    load_body: str = "ping"
    load_workers: int = 16
    recovery_targets_s: tuple[float, ...] = ()

    @property
    def censor_after_s(self) -> float:
        return CENSOR_FACTOR * self.recovery_target_s


@dataclass(frozen=True)
class Outage:
    started_s: float
    ttr_s: float | None = None

    @property
    def censored(self) -> bool:
        return self.ttr_s is None


@dataclass(frozen=True)
class TrialResult:
    index: int
    outages: tuple[Outage, ...]
    mttf_s: float
    duration_s: float
    requests_sent: int = 0
    requests_failed: int = 0

    @property
    def ttr_samples(self) -> list[float]:
        return [o.ttr_s for o in self.outages if not o.censored]

    @property
    def censored(self) -> int:
        return sum(1 for o in self.outages if o.censored)


@dataclass(frozen=True)
class TtrReport:
    samples_s: tuple[float, ...]
    mean_s: float
    std_dev_s: float | None
    variance_s2: float | None
    rms_about_target_s: float
    mttf_s: float
    availability: float
    exceedance_fraction: float
    censored: int = 0
    target_s: float = 0.0
    threshold_s: float = 0.0


@dataclass(frozen=True)
class BenchReport:
    report: TtrReport | None
    trials: tuple[TrialResult, ...]
    rms_by_target: dict = field(default_factory=dict)


class Preference(str, Enum):
    A = "a"
    B = "b"
    TIE = "tie"


# --- Configuration ---

def _positive(doc: dict, key: str, where: str, default=None, integer: bool = False):
    value = doc.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
        raise ConfigError(f"{where}.{key}: expected a {'whole ' if integer else ''}number")
    if value <= 0:
        raise ConfigError(f"{where}.{key}: must be > 0")
    return value


def _parse_profile(doc) -> WorkloadProfile:
    if not isinstance(doc, dict):
        raise ConfigError("profile: expected an object")
    shape = doc.get("shape", "constant")
    if shape not in SHAPES:
        raise ConfigError(f"profile.shape: expected one of {', '.join(SHAPES)}")
    profile = WorkloadProfile(
        shape=shape,
        base_rate=_positive(doc, "base_rate", "profile", 10.0),
        duration_s=_positive(doc, "duration_s", "profile", 10.0),
        step_rate=_positive(doc, "step_rate", "profile"),
        step_at_s=_positive(doc, "step_at_s", "profile"),
        doubling_period_s=_positive(doc, "doubling_period_s", "profile"),
    )
    if shape == "step" and (profile.step_rate is None or profile.step_at_s is None):
        raise ConfigError("profile: step shape needs step_rate and step_at_s")
    if shape == "exponential" and profile.doubling_period_s is None:
        raise ConfigError("profile: exponential shape needs doubling_period_s")
    return profile


def _parse_fault(doc, where: str) -> ScheduledFault:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    at_s = doc.get("at_s")
    if isinstance(at_s, bool) or not isinstance(at_s, (int, float)) or at_s < 0:
        raise ConfigError(f"{where}.at_s: expected a number >= 0")
    fault = doc.get("fault", {})
    if not isinstance(fault, dict) or not isinstance(fault.get("kind", "none"), str) \
            or not isinstance(fault.get("params", {}), dict):
        raise ConfigError(f"{where}.fault: expected {{\"kind\": str, \"params\": object, \"seed\": int}}")
    seed = fault.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"{where}.fault.seed: expected an integer")
    mode = FaultMode(fault.get("kind", "none"), dict(fault.get("params", {})), seed)
    return ScheduledFault(float(at_s), mode, _positive(doc, "trigger_body_bytes", where, integer=True))


def parse_bench_config(text: bytes | str) -> BenchConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", e.lineno, e.colno) from e
    if not isinstance(doc, dict):
        raise ConfigError("bench config must be a JSON object")

    known = set(BenchConfig.__dataclass_fields__) | {"profile", "fault_schedule"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")

    schedule = doc.get("fault_schedule", [])
    if not isinstance(schedule, list):
        raise ConfigError("fault_schedule: expected a list")
    targets = doc.get("recovery_targets_s", [])
    if not isinstance(targets, list):
        raise ConfigError("recovery_targets_s: expected a list")

    return BenchConfig(
        profile=_parse_profile(doc.get("profile", {})),
        fault_schedule=tuple(sorted((_parse_fault(f, f"fault_schedule[{i}]") for i, f in enumerate(schedule)),
                                    key=lambda f: f.at_s)),
        trials=_positive(doc, "trials", "bench", 1, integer=True),
        recovery_target_s=_positive(doc, "recovery_target_s", "bench", 2.0),
        patience_threshold_s=_positive(doc, "patience_threshold_s", "bench", 8.0),
        probe_interval_ms=_positive(doc, "probe_interval_ms", "bench", 10, integer=True),
        interposer=str(doc.get("interposer", "127.0.0.1:8080")),
        fixture=str(doc.get("fixture", "127.0.0.1:9090")),
        load_path=str(doc.get("load_path", "/echo")),
        load_body=str(doc.get("load_body", "ping")),
        load_workers=_positive(doc, "load_workers", "bench", 16, integer=True),
        recovery_targets_s=tuple(_positive({"t": t}, "t", f"recovery_targets_s[{i}]") for i, t in enumerate(targets)),
    )


# --- Workload ---

def arrival_times(profile: WorkloadProfile) -> np.ndarray:
    """Request offsets in seconds from the start of the run, ascending and < duration_s."""
    duration = profile.duration_s
    if profile.shape == "constant":
        return np.arange(0.0, duration, 1.0 / profile.base_rate)
    if profile.shape == "step":
        step_at = min(profile.step_at_s, duration)
        before = np.arange(0.0, step_at, 1.0 / profile.base_rate)
        after = step_at + np.arange(0.0, duration - step_at, 1.0 / profile.step_rate)
        return np.concatenate([before, after])

    # rate(t) = base * 2^(t/T); the k-th arrival is where the integrated rate reaches k.
    period = profile.doubling_period_s
    scale = profile.base_rate * period / math.log(2)
    total = math.ceil(scale * (2.0 ** (duration / period) - 1.0)) + 1
    k = np.arange(total, dtype=float)
    times = period * np.log2(1.0 + k / scale)
    return times[times < duration]


class LoadGenerator:
    """Fires one request per scheduled offset from a thread pool; slow replies never delay later sends."""

    def __init__(self, url: str, body: bytes, offsets: Sequence[float], workers: int = 16,
                 timeout_s: float = LOAD_TIMEOUT_S):
        self.url = url
        self.body = body
        self.offsets = offsets
        self.workers = workers
        self.timeout_s = timeout_s

    def _send(self) -> bool:
        try:
            return requests.post(self.url, data=self.body, timeout=self.timeout_s).status_code < 500
        except requests.RequestException:
            return False

    def run(self, stop: threading.Event, start_at: float) -> tuple[int, int]:
        """Returns (sent, failed)."""
        futures = []
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="load") as pool:
            for offset in self.offsets:
                delay = start_at + float(offset) - time.monotonic()
                stopped = stop.wait(delay) if delay > 0 else stop.is_set()
                if stopped:
                    break
                futures.append(pool.submit(self._send))
            outcomes = [f.result() for f in futures]
        return len(outcomes), outcomes.count(False)


# --- Measurement ---

def measure_outages(probe: Callable[[], bool], duration_s: float, probe_interval_ms: int,
                    censor_after_s: float, clock: Callable[[], float] = time.monotonic,
                    sleep: Callable[[float], None] = time.sleep) -> tuple[tuple[Outage, ...], tuple[float, ...]]:
    """
    Probes every probe_interval_ms for duration_s (longer while an outage is
    still open). An outage runs from the first failed probe to the next
    successful one; an outage still open after censor_after_s is recorded
    as censored and ends the measurement.

    Returns:
        (outages, uptimes) where uptimes[i] is the time from the start (or
        the previous recovery) to the first failed probe of outage i.
    """
    interval = probe_interval_ms / 1000.0
    start = clock()
    up_since = start
    down_since = None
    outages: list[Outage] = []
    uptimes: list[float] = []

    while True:
        now = clock()
        if down_since is None and now - start >= duration_s:
            break
        healthy = probe()
        if down_since is None and not healthy:
            down_since = now
            uptimes.append(now - up_since)
        elif down_since is not None and healthy:
            outages.append(Outage(down_since - start, now - down_since))
            logging.info(f"Outage at {down_since - start:.3f} s repaired in {now - down_since:.3f} s")
            down_since = None
            up_since = now
        elif down_since is not None and now - down_since >= censor_after_s:
            logging.warning(f"No recovery within {censor_after_s:.1f} s; outage censored")
            outages.append(Outage(down_since - start))
            break
        sleep(max(0.0, now + interval - clock()))
    return tuple(outages), tuple(uptimes)


def mean_time_to_failure(uptimes: Sequence[float], duration_s: float) -> float:
    return float(np.mean(uptimes)) if uptimes else float(duration_s)


def _url(hostport: str, path: str) -> str:
    return f"http://{hostport}{path}"


def inject_fault(config: BenchConfig, fault: ScheduledFault, session: requests.Session | None = None):
    """Sets the fixture's fault mode, then sends the trigger body if the schedule asks for one."""
    http = session or requests
    try:
        response = http.post(_url(config.fixture, "/ctl/fault"), data=fault.mode.to_json(), timeout=PROBE_TIMEOUT_S)
        if response.status_code != 200:
            logging.error(f"Fixture refused fault {fault.mode.kind}: {response.text.strip()}")
            return
        logging.info(f"Injected {fault.mode.kind} at {fault.at_s:.2f} s")
        if fault.trigger_body_bytes:
            http.post(_url(config.fixture, "/echo"), data=b"x" * fault.trigger_body_bytes, timeout=PROBE_TIMEOUT_S)
    except requests.RequestException as e:
        # A crash trigger usually ends this way.
        logging.debug(f"Fault injection request ended with: {e}")


def _wait_until_healthy(probe: Callable[[], bool], timeout_s: float) -> bool:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        if probe():
            return True
        time.sleep(0.1)
    return False


def run_trial(config: BenchConfig, trial_index: int) -> TrialResult:
    session = requests.Session()
    health_url = _url(config.interposer, "/health")

    def probe() -> bool:
        try:
            return session.get(health_url, timeout=PROBE_TIMEOUT_S).status_code == 200
        except requests.RequestException:
            return False

    inject_fault(config, ScheduledFault(0.0, FaultMode()))
    if not _wait_until_healthy(probe, config.censor_after_s):
        logging.warning(f"Trial {trial_index}: system unhealthy before the trial started")

    stop = threading.Event()
    start_at = time.monotonic()
    load = LoadGenerator(_url(config.interposer, config.load_path), config.load_body.encode("utf-8"),
                         arrival_times(config.profile), config.load_workers)
    load_result: list[tuple[int, int]] = []
    load_thread = threading.Thread(target=lambda: load_result.append(load.run(stop, start_at)),
                                   name="load-driver", daemon=True)
    timers = [threading.Timer(f.at_s, inject_fault, args=(config, f)) for f in config.fault_schedule]

    logging.info(f"Trial {trial_index}: {config.profile.shape} load for {config.profile.duration_s} s, "
                 f"{len(timers)} scheduled fault(s)")
    load_thread.start()
    for timer in timers:
        timer.start()
    try:
        outages, uptimes = measure_outages(probe, config.profile.duration_s, config.probe_interval_ms,
                                           config.censor_after_s)
    finally:
        stop.set()
        for timer in timers:
            timer.cancel()
        load_thread.join()
        session.close()

    sent, failed = load_result[0] if load_result else (0, 0)
    return TrialResult(trial_index, outages, mean_time_to_failure(uptimes, config.profile.duration_s),
                       config.profile.duration_s, sent, failed)


# --- Metrics ---

def compute_metrics(samples_s: Iterable[float], mttf_s: float, target_s: float, threshold_s: float,
                    censored: int = 0) -> TtrReport:
    """
    Moments over the uncensored samples; exceedance over all outages,
    censored ones included. Variance is the (n-1) sample variance and is
    absent for a single sample.
    """
    x = np.asarray(list(samples_s), dtype=float)
    if x.size == 0:
        raise EmptySamplesError("at least one uncensored TTR sample is required")
    if np.any(x < 0) or mttf_s < 0 or censored < 0:
        raise ValueError("samples, mttf and censored count must be >= 0")

    n = x.size
    mean = float(np.mean(x))
    variance = float(np.var(x, ddof=1)) if n >= 2 else None
    std_dev = math.sqrt(variance) if variance is not None else None
    rms = float(np.sqrt(np.mean((x - target_s) ** 2)))
    availability = mttf_s / (mttf_s + mean) if mttf_s + mean > 0 else 1.0
    exceedance = (int(np.count_nonzero(x > threshold_s)) + censored) / (n + censored)

    return TtrReport(tuple(float(v) for v in x), mean, std_dev, variance, rms, float(mttf_s),
                     availability, exceedance, censored, float(target_s), float(threshold_s))


def compare_reports(a: TtrReport, b: TtrReport, threshold_s: float) -> tuple[Preference, str]:
    """Lower exceedance wins; ties go to lower σ (absent σ ranks worst), then lower μ."""
    if a.threshold_s != threshold_s or b.threshold_s != threshold_s:
        logging.warning(f"Reports were computed with thresholds {a.threshold_s} and {b.threshold_s}, "
                        f"comparing at {threshold_s}")

    def sigma(report: TtrReport) -> float:
        return math.inf if report.std_dev_s is None else report.std_dev_s

    for label, va, vb in (("exceedance fraction", a.exceedance_fraction, b.exceedance_fraction),
                          ("σ", sigma(a), sigma(b)),
                          ("μ", a.mean_s, b.mean_s)):
        if va < vb:
            return Preference.A, f"prefer a: lower {label} ({va:.4g} < {vb:.4g}) at threshold {threshold_s:g} s"
        if vb < va:
            return Preference.B, f"prefer b: lower {label} ({vb:.4g} < {va:.4g}) at threshold {threshold_s:g} s"
    return Preference.TIE, f"tie: equal exceedance, σ and μ at threshold {threshold_s:g} s"


def audit_growth(admitted_times_ms: Sequence[int], window_ms: int, factor: float,
                 bootstrap_floor: int = 10) -> list[int]:
    """
    Recounts admissions per tumbling window (anchored at the first one) and
    returns the indices of windows that admitted more than
    ceil(factor * max(previous window, bootstrap_floor)).
    """
    if not len(admitted_times_ms):
        return []
    t = np.asarray(admitted_times_ms, dtype=np.int64)
    counts = np.bincount((t - t[0]) // window_ms)
    offenders = []
    for i, count in enumerate(counts):
        previous = int(counts[i - 1]) if i else 0
        if count > ceil_scaled(max(previous, bootstrap_floor), factor):
            offenders.append(i)
    return offenders


def admitted_times_from_log(lines: Iterable[str]) -> list[int]:
    """Timestamps of Admit lines in a decision log."""
    times = []
    for line in lines:
        parts = line.split()
        if len(parts) >= 2 and parts[1] == "Admit":
            times.append(int(parts[0]))
    return times


# --- Orchestration and reports ---

def run_bench(config: BenchConfig, trial_runner: Callable[[BenchConfig, int], TrialResult] = run_trial) -> BenchReport:
    trials = tuple(trial_runner(config, i) for i in range(config.trials))
    samples = [s for trial in trials for s in trial.ttr_samples]
    censored = sum(trial.censored for trial in trials)
    mttf = float(np.mean([trial.mttf_s for trial in trials]))

    try:
        report = compute_metrics(samples, mttf, config.recovery_target_s, config.patience_threshold_s, censored)
    except EmptySamplesError:
        logging.warning(f"No repaired outage in {config.trials} trial(s) ({censored} censored); no TTR report")
        return BenchReport(None, trials)

    rms_by_target = {t: compute_metrics(samples, mttf, t, config.patience_threshold_s, censored).rms_about_target_s
                     for t in config.recovery_targets_s}
    sigma = "n/a" if report.std_dev_s is None else f"{report.std_dev_s:.3f}"
    logging.info(f"TTR over {len(samples)} outage(s): μ={report.mean_s:.3f} s, σ={sigma} s, "
                 f"availability={report.availability:.4f}, exceedance={report.exceedance_fraction:.2f}")
    return BenchReport(report, trials, rms_by_target)


def report_to_json(bench: BenchReport) -> bytes:
    doc = {
        "report": asdict(bench.report) if bench.report else None,
        "rms_by_target": {f"{t:g}": v for t, v in sorted(bench.rms_by_target.items())},
        "trials": [
            {
                "index": trial.index,
                "mttf_s": trial.mttf_s,
                "duration_s": trial.duration_s,
                "requests_sent": trial.requests_sent,
                "requests_failed": trial.requests_failed,
                "outages": [asdict(o) for o in trial.outages],
                "ttr_s": trial.ttr_samples,
            }
            for trial in bench.trials
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def report_from_json(data: bytes | str) -> TtrReport:
    """Reads the TtrReport back out of a report file written by report_to_json."""
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid report JSON: {e.msg}", e.lineno, e.colno) from e
    section = doc.get("report") if isinstance(doc, dict) else None
    if not isinstance(section, dict):
        raise ConfigError("report file has no TTR report")
    try:
        section["samples_s"] = tuple(section["samples_s"])
        return TtrReport(**section)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed TTR report: {e}") from e
