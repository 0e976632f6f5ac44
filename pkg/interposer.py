# interposer.py
"""
The reverse proxy. Each admitted request flows through

    state gate -> static fuses -> rate fuse -> growth fuse -> deadline stamp
    -> upstream (bounded by TTL and watchdog) -> output guard -> coercion

and every path out of the pipeline is one well-formed HTTP response. The
reboot controller runs on the context's control queue and walks the module
state machine Suspended -> Rebooting -> Running.
"""
import time
import random
import signal
import socket
import logging
import itertools
import threading
import subprocess
import socketserver
from typing import Sequence

from errors import (HttpParseError, UpstreamError, UpstreamConnectError, UpstreamProtocolError,
                    UpstreamTimeoutError)
from events import EventBus
from fuse_engine import Decision, Verdict
from guard_context import GuardContext, build_context
from http_codec import HttpMessage, MessageReader, make_request, make_response, serialize_message
from invariant_model import InvariantSpec, format_traffic_record
from module_state import ModuleEvent, ModuleState, State
from output_guard import FailStopAction, GuardVerdict, PASS, coerce_failstop, guard_response
from resource_cop import WatchdogVerdict, rss_usage_source, watchdog_check
from utils import now_ms

DEADLINE_HEADER = "X-Guardrail-Deadline-Ms"
REASON_HEADER = "X-Guardrail-Reason"

HEALTH_TIMEOUT_S = 0.5
HEALTH_RETRY_S = 0.1
USAGE_POLL_TIMEOUT_S = 0.2
IDLE_TIMEOUT_S = 30.0
DRAIN_POLL_S = 0.01
HEALTH_CHECKS_PER_REBOOT = 300
MAX_REBOOT_ATTEMPTS = 3

REJECT_STATUS = {"size": 413, "charset": 400, "forbidden": 400}


def local_error(status: int, reason: str, retry_after_s: int | None = None,
                close: bool = False) -> HttpMessage:
    """A response generated by the guardrail itself rather than the upstream."""
    headers = [("Content-Type", "text/plain"), (REASON_HEADER, reason)]
    if retry_after_s is not None:
        headers.append(("Retry-After", str(retry_after_s)))
    if close:
        headers.append(("Connection", "close"))
    return make_response(status, f"{reason}\n".encode("ascii"), tuple(headers))


# --- Upstream side ---

class UpstreamClient:
    """One reusable upstream connection, owned by a single client connection."""

    def __init__(self, address: tuple[str, int]):
        self.address = address
        self.sock: socket.socket | None = None
        self.reader: MessageReader | None = None

    def _connect(self, deadline: float):
        try:
            self.sock = socket.create_connection(self.address, timeout=max(0.001, deadline - time.monotonic()))
        except TimeoutError as e:
            raise UpstreamTimeoutError(f"connect to {self.address[0]}:{self.address[1]} timed out") from e
        except OSError as e:
            raise UpstreamConnectError(f"cannot connect to {self.address[0]}:{self.address[1]}: {e}") from e
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.reader = MessageReader("response")

    def exchange(self, request: HttpMessage, deadline: float) -> HttpMessage:
        """
        Sends request and reads the response before the monotonic deadline.
        Raises UpstreamTimeoutError, UpstreamConnectError or UpstreamProtocolError;
        the connection is dropped after any failure.
        """
        reused = self.sock is not None
        if not reused:
            self._connect(deadline)
        try:
            return self._round_trip(request, deadline)
        except UpstreamConnectError:
            if not reused:
                raise
            # The upstream closed an idle keep-alive connection; retry once on a fresh one.
            self._connect(deadline)
            return self._round_trip(request, deadline)

    def _round_trip(self, request: HttpMessage, deadline: float) -> HttpMessage:
        try:
            self.sock.settimeout(max(0.001, deadline - time.monotonic()))
            self.sock.sendall(serialize_message(request))
            response = self.reader.read(self.sock, deadline)
        except TimeoutError as e:
            self.close()
            raise UpstreamTimeoutError("upstream did not answer in time") from e
        except HttpParseError as e:
            self.close()
            raise UpstreamProtocolError(f"malformed upstream response: {e}") from e
        except OSError as e:
            self.close()
            raise UpstreamConnectError(f"upstream connection failed: {e}") from e
        if response is None:
            self.close()
            raise UpstreamConnectError("upstream closed the connection without responding")
        if not response.keep_alive:
            self.close()
        return response

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
        self.sock = None
        self.reader = None


def request_once(address: tuple[str, int], request: HttpMessage, timeout_s: float) -> HttpMessage:
    client = UpstreamClient(address)
    try:
        return client.exchange(request, time.monotonic() + timeout_s)
    finally:
        client.close()


def health_check(address: tuple[str, int], timeout_s: float = HEALTH_TIMEOUT_S) -> bool:
    """`GET /health` answered 200 within timeout_s."""
    try:
        return request_once(address, make_request("GET", "/health"), timeout_s).status == 200
    except UpstreamError:
        return False


def request_soft_reboot(address: tuple[str, int], timeout_s: float = HEALTH_TIMEOUT_S) -> bool:
    try:
        return request_once(address, make_request("POST", "/ctl/reboot"), timeout_s).status == 200
    except UpstreamError:
        return False


class UpstreamUsagePoller:
    """
    Usage source for the resource cop: asks a cooperative upstream for its
    usage with `POST /ctl/usage`. An upstream that doesn't implement the
    endpoint still answers, which is enough to prove liveness. Transport
    failures raise.
    """

    def __init__(self, address: tuple[str, int], timeout_s: float = USAGE_POLL_TIMEOUT_S):
        self.address = address
        self.timeout_s = timeout_s
        self.supported = True

    def __call__(self) -> int | None:
        response = request_once(self.address, make_request("POST", "/ctl/usage"), self.timeout_s)
        body = response.body.strip()
        if response.status != 200 or not body.isdigit():
            if self.supported:
                self.supported = False
                logging.info(f"Upstream does not report usage (status {response.status}); "
                             f"polling for liveness only.")
            return None
        return int(body)


class UpstreamSupervisor:
    """Runs the upstream as a child process, respawning it when it dies."""

    def __init__(self, command: Sequence[str], event_bus: EventBus, stop_timeout_s: float = 2.0):
        self.command = list(command)
        self.event_bus = event_bus
        self.stop_timeout_s = stop_timeout_s
        self.process: subprocess.Popen | None = None
        self._stopping = False
        self._lock = threading.Lock()

    @property
    def pid(self) -> int | None:
        return self.process.pid if self.process else None

    def start(self):
        with self._lock:
            self._stopping = False
            self._spawn()

    def _spawn(self):
        self.process = subprocess.Popen(self.command)
        logging.info(f"Started upstream (pid {self.process.pid}): {' '.join(self.command)}")

    def check(self):
        """Called on every cop tick."""
        with self._lock:
            if self.process is None or self._stopping:
                return
            returncode = self.process.poll()
            if returncode is None:
                return
            logging.error(f"Upstream (pid {self.process.pid}) exited with code {returncode}; respawning.")
            self._spawn()
        self.event_bus.publish("upstream:died", returncode)

    def restart(self):
        with self._lock:
            self._terminate()
            self._spawn()

    def _terminate(self):
        if self.process is None or self.process.poll() is not None:
            return
        self.process.terminate()
        try:
            self.process.wait(timeout=self.stop_timeout_s)
        except subprocess.TimeoutExpired:
            logging.warning(f"Upstream (pid {self.process.pid}) ignored SIGTERM; killing it.")
            self.process.kill()
            self.process.wait()

    def stop(self):
        with self._lock:
            self._stopping = True
            self._terminate()

    def rss(self) -> int | None:
        pid = self.pid
        return rss_usage_source(pid)() if pid is not None else None


# --- Pipeline ---

class Interposer:
    def __init__(self, context: GuardContext):
        self.context = context
        self.spec = context.spec
        self.guard_counter = 0
        self.violations: tuple[int, ...] = ()
        self._ids = itertools.count(1)
        self._guard_lock = threading.Lock()
        self._active = 0
        self._active_cond = threading.Condition()
        self._reboot_rng = random.Random(self.spec.sampling.rng_seed)
        self._respawned = False
        self._stopping = False
        self.health_checks_per_reboot = HEALTH_CHECKS_PER_REBOOT
        self.max_reboot_attempts = MAX_REBOOT_ATTEMPTS

        bus = context.event_bus
        bus.subscribe("state:module_changed", self._on_state_changed)
        bus.subscribe("cop:budget_exceeded", lambda budget: self._fail_stop("budget"))
        bus.subscribe("cop:planned_reboot", lambda forecast: self._fail_stop("planned_reboot"))
        bus.subscribe("cop:lease_expired", lambda lease: self._fail_stop("lease"))
        bus.subscribe("upstream:died", self._on_upstream_died)

    def start(self):
        self._stopping = False
        self.context.start()

    def stop(self):
        self._stopping = True
        self.context.stop()

    @property
    def state(self) -> ModuleState:
        return self.context.state_machine.current

    # --- Request path ---

    def handle(self, request: HttpMessage, upstream: UpstreamClient) -> HttpMessage:
        """Entry point for connection handlers: never raises."""
        with self._active_cond:
            self._active += 1
        try:
            now = now_ms()
            if self.context.traffic_log is not None:
                self.context.traffic_log.append(format_traffic_record(now, request.body))
            try:
                return self.pipeline(request, upstream, now)
            except Exception as e:
                logging.error(f"Unhandled error in pipeline: {e}", exc_info=True)
                return local_error(500, "internal")
        finally:
            with self._active_cond:
                self._active -= 1
                self._active_cond.notify_all()

    def pipeline(self, request: HttpMessage, upstream: UpstreamClient, now: int | None = None) -> HttpMessage:
        ctx = self.context
        now = now_ms() if now is None else now
        started = time.monotonic()

        current = ctx.state_machine.current
        if current.state is not State.RUNNING:
            return local_error(503, current.state.value.lower(), ctx.retry_after_s())

        decision = ctx.fuses.check(request.body, now)
        if not decision.admitted:
            return self.decision_response(decision)

        request_id = f"req-{next(self._ids)}"
        deadline = ctx.cop.begin_request(request_id, now)
        ctx.cop.charge_request(request_id, len(request.body), now)
        try:
            elapsed = int((time.monotonic() - started) * 1000)
            decision = ctx.cop.check_deadline(request_id, now + elapsed)
            if not decision.admitted:
                ctx.fuses.record(decision, now + elapsed)
                return self.decision_response(decision)

            remaining = deadline.remaining(now + elapsed)
            forwarded = request.with_header(DEADLINE_HEADER, str(remaining))
            sent = time.monotonic()
            try:
                response = upstream.exchange(forwarded, sent + remaining / 1000.0)
            except UpstreamTimeoutError:
                # The hung exchange is already closed; answer for it.
                expired = Decision.squash("ttl")
                ctx.fuses.record(expired, now + int((time.monotonic() - started) * 1000))
                return self.decision_response(expired)
            except UpstreamError as e:
                logging.warning(f"Upstream {e.reason} failure: {e}")
                return local_error(502, e.reason)

            finished = now + int((time.monotonic() - started) * 1000)
            if watchdog_check(now, finished, self.spec.resource_rules.watchdog_ms) is WatchdogVerdict.EXPIRED:
                # An upstream that overran the deadline it was handed; its answer is discarded.
                expired = Decision.squash("watchdog")
                ctx.fuses.record(expired, finished)
                return self.decision_response(expired)

            ctx.fuses.feedback((time.monotonic() - sent) * 1000.0)
            ctx.cop.renew_upstream_lease()
            verdict = self._guard(request, response, now + int((time.monotonic() - started) * 1000))
            if verdict.is_violation:
                return local_error(502, "guard")
            return response
        finally:
            ctx.cop.end_request(request_id)

    def decision_response(self, decision: Decision) -> HttpMessage:
        if decision.verdict is Verdict.REJECT:
            return local_error(REJECT_STATUS.get(decision.reason, 400), decision.reason)
        if decision.verdict is Verdict.SHED:
            if decision.reason == "rate":
                return local_error(429, "rate")
            window_ms = self.spec.input_rules[decision.rule_id].window_ms
            return local_error(503, decision.reason, max(1, -(-window_ms // 1000)))
        return local_error(504, decision.reason)

    def _guard(self, request: HttpMessage, response: HttpMessage, now: int) -> GuardVerdict:
        ctx = self.context
        if not self.spec.output_rules:
            return PASS
        with self._guard_lock:
            counter = self.guard_counter
            self.guard_counter += 1
        verdict = guard_response(request.body, response.status, response.body,
                                 self.spec.output_rules, self.spec.sampling, counter)
        ctx.guard_log.append(verdict.log_line(now))
        ctx.event_bus.publish("guard:verdict", verdict)
        if not verdict.is_violation:
            return verdict

        with self._guard_lock:
            action, self.violations = coerce_failstop(verdict, self.spec.failstop, self.violations, now)
        logging.warning(f"Guard violation ({verdict.detail}) on output rule {verdict.rule_id}; "
                        f"{len(self.violations)} in window")
        if action is FailStopAction.SUSPEND:
            ctx.state_machine.fire(ModuleEvent.VIOLATION_THRESHOLD, "guard")
        elif action is FailStopAction.STOP:
            ctx.state_machine.fire(ModuleEvent.STOP_COMMAND, "guard")
        return verdict

    # --- Fail-stop and reboot controller ---

    def _fail_stop(self, reason: str):
        if not self.context.state_machine.is_running:
            logging.debug(f"Ignoring '{reason}' while {self.state.state.value}")
            return
        self.context.state_machine.fire(ModuleEvent.VIOLATION_THRESHOLD, reason)

    def _on_upstream_died(self, returncode: int):
        self._respawned = True
        self._fail_stop("crash")

    def _on_state_changed(self, old: ModuleState, new: ModuleState, reason: str = ""):
        ctx = self.context
        if new.state is State.SUSPENDED:
            ctx.cop.pause()
            failstop = self.spec.failstop
            delay_ms = failstop.reboot_delay_ms
            if failstop.reboot_jitter_ms:
                delay_ms += self._reboot_rng.randint(0, failstop.reboot_jitter_ms)
            logging.info(f"Upstream suspended ({reason}); reboot in {delay_ms} ms")
            ctx.control_queue.call_later(delay_ms / 1000.0, "reboot timer", self._reboot_timer)
        elif new.state is State.REBOOTING:
            ctx.control_queue.submit("reboot", self._reboot)
        elif new.state is State.RUNNING:
            self._reset_after_reboot()
        elif new.state is State.STOPPED:
            ctx.cop.pause()
            logging.error(f"Upstream stopped ({reason}); every request is answered 503 from now on.")

    def _reboot_timer(self):
        ctx = self.context
        if ctx.state_machine.current.state is not State.SUSPENDED:
            return
        # In-flight requests finish under their own TTL.
        drain_until = time.monotonic() + self.spec.resource_rules.request_ttl_ms / 1000.0
        while ctx.cop.in_flight() and time.monotonic() < drain_until and not self._stopping:
            time.sleep(DRAIN_POLL_S)
        ctx.state_machine.fire(ModuleEvent.REBOOT_TIMER, "delay elapsed")

    def _reboot(self):
        ctx = self.context
        for attempt in range(1, self.max_reboot_attempts + 1):
            self._reboot_upstream()
            for _ in range(self.health_checks_per_reboot):
                if ctx.state_machine.current.state is not State.REBOOTING or self._stopping:
                    return
                if health_check(ctx.upstream):
                    ctx.state_machine.fire(ModuleEvent.REBOOT_DONE, "healthy")
                    return
                time.sleep(HEALTH_RETRY_S)
            logging.warning(f"Upstream still unhealthy after reboot attempt {attempt} of {self.max_reboot_attempts}")

        # Rebooting has no legal exit but reboot_done, so requests keep getting 503.
        logging.error(f"Giving up on the upstream after {self.max_reboot_attempts} reboot attempts")
        ctx.event_bus.publish("upstream:unrecoverable", self.max_reboot_attempts)

    def _reboot_upstream(self):
        ctx = self.context
        if ctx.supervisor is not None:
            if self._respawned:
                self._respawned = False
            else:
                ctx.supervisor.restart()
        elif not request_soft_reboot(ctx.upstream):
            logging.warning("Upstream did not accept POST /ctl/reboot; waiting for it to become healthy.")

    def _reset_after_reboot(self):
        ctx = self.context
        ctx.fuses.reset()
        with self._guard_lock:
            self.violations = ()
        ctx.cop.reset()
        logging.info("Upstream back in service; fuse windows, guard history and budgets reset.")

    def wait_idle(self, timeout_s: float) -> bool:
        """Blocks until no request is inside the pipeline; False if timeout_s passed first."""
        with self._active_cond:
            return self._active_cond.wait_for(lambda: self._active == 0, timeout=timeout_s)


# --- Client side ---

class ConnectionHandler(socketserver.BaseRequestHandler):
    """Keep-alive loop for one client connection with its own upstream connection."""

    def handle(self):
        interposer: Interposer = self.server.interposer
        reader = MessageReader("request")
        upstream = UpstreamClient(interposer.context.upstream)
        self.request.settimeout(IDLE_TIMEOUT_S)
        try:
            while True:
                try:
                    request = reader.read(self.request)
                except HttpParseError as e:
                    logging.debug(f"Rejecting unparseable request from {self.client_address[0]}: {e}")
                    self._send(local_error(e.status, "parse", close=True))
                    return
                except OSError:
                    return
                if request is None:
                    return

                response = interposer.handle(request, upstream)
                if not self._send(response) or not (request.keep_alive and response.keep_alive):
                    return
        finally:
            upstream.close()

    def _send(self, response: HttpMessage) -> bool:
        try:
            self.request.sendall(serialize_message(response))
            return True
        except OSError as e:
            logging.debug(f"Client went away before the response: {e}")
            return False


class InterposerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    block_on_close = False

    def __init__(self, address: tuple[str, int], interposer: Interposer):
        super().__init__(address, ConnectionHandler)
        self.interposer = interposer

    @property
    def port(self) -> int:
        return self.server_address[1]

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name=f"interposer-{self.port}", daemon=True)
        thread.start()
        return thread


def create_interposer(spec: InvariantSpec, upstream: tuple[str, int], upstream_cmd: Sequence[str] | None = None,
                      rss_poll: bool = False, usage_poll: bool = True, tick_ms: int = 50,
                      decision_log: str | None = None, guard_log: str | None = None,
                      traffic_log: str | None = None) -> Interposer:
    bus = EventBus()
    supervisor = UpstreamSupervisor(upstream_cmd, bus) if upstream_cmd else None
    if rss_poll and supervisor is not None:
        usage_source = supervisor.rss
    elif usage_poll:
        usage_source = UpstreamUsagePoller(upstream)
    else:
        usage_source = None
    context = build_context(spec, upstream, bus, usage_source, tick_ms, decision_log, guard_log,
                            traffic_log, supervisor)
    return Interposer(context)


def run_until_signalled(interposer: Interposer, listen: tuple[str, int]) -> int:
    """Serves until SIGTERM/SIGINT, then drains in-flight requests (bounded by the TTL) and returns 0."""
    server = InterposerServer(listen, interposer)
    stop_requested = threading.Event()

    def _terminate(signum, frame):
        logging.info(f"Signal {signum} received; draining.")
        stop_requested.set()

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)

    interposer.start()
    server.serve_in_thread()
    host, port = interposer.context.upstream
    logging.info(f"Guardrail listening on {listen[0]}:{server.port}, upstream {host}:{port}")
    while not stop_requested.wait(0.5):
        pass

    server.shutdown()
    drain_s = interposer.spec.resource_rules.request_ttl_ms / 1000.0
    if not interposer.wait_idle(drain_s):
        logging.warning(f"Requests still in flight after {drain_s:.1f} s; exiting anyway.")
    server.server_close()
    interposer.stop()
    logging.info("Guardrail stopped.")
    return 0
