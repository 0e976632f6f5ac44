# fault_service.py
"""
Deliberately buggy upstream used to exercise the guardrail: a tiny echo/sort
service whose failure behavior is switched at runtime through
`POST /ctl/fault`. Requests are handled one at a time so that fault effects
happen in a deterministic order for a given (mode, seed, request sequence).

    python fault_service.py --listen 127.0.0.1:9090 --seed 7
"""
import os
import sys
import json
import time
import random
import signal
import argparse
import logging
import threading
import socketserver
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from errors import FaultCrash, HttpParseError
from faults.api import FaultPlugin
from http_codec import HttpMessage, MessageReader, make_response, serialize_message
from plugin_manager import PluginManager
from utils import setup_logging, parse_hostport, parse_int_list

CRASH_EXIT_CODE = 70
READ_TIMEOUT_S = 5.0


@dataclass(frozen=True)
class FaultMode:
    kind: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> bytes:
        doc = {"kind": self.kind, "params": self.params, "seed": self.seed}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def parse_fault_mode(body: bytes, plugins: PluginManager) -> FaultMode:
    """Parses and validates a FaultMode document. Raises ValueError on anything invalid."""
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"fault mode is not JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValueError("fault mode must be a JSON object")
    unknown = set(doc) - {"kind", "params", "seed"}
    if unknown:
        raise ValueError(f"unknown keys: {', '.join(sorted(unknown))}")

    kind = doc.get("kind", "none")
    params = doc.get("params", {})
    seed = doc.get("seed", 0)
    if not isinstance(params, dict):
        raise ValueError("params must be an object")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ValueError("seed must be a non-negative integer")

    if kind == "none":
        if params:
            raise ValueError("kind 'none' takes no params")
        return FaultMode("none", {}, seed)
    plugin = plugins.get(kind) if isinstance(kind, str) else None
    if plugin is None:
        raise ValueError(f"unknown fault kind: {kind!r}")
    return FaultMode(kind, plugin.validate(params), seed)


def _text(status: int, text: str) -> HttpMessage:
    return make_response(status, f"{text}\n".encode("ascii", "backslashreplace"), (("Content-Type", "text/plain"),))


class FaultService:
    """The fixture's application logic, independent of sockets."""

    def __init__(self, plugins: PluginManager, seed: int = 0,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        self.plugins = plugins
        self.default_seed = seed
        self.sleep = sleep
        self.clock = clock
        self.mode = FaultMode(seed=seed)
        self.active: FaultPlugin | None = None
        self.rng = random.Random(seed)
        self.retained: list[bytearray] = []
        self.leaked_bytes = 0
        self.hits = 0
        self.arrivals: deque[float] = deque()

    # --- Fault control ---

    def set_fault(self, mode: FaultMode) -> HttpMessage:
        self.mode = mode
        self.active = self.plugins.get(mode.kind) if mode.kind != "none" else None
        self.rng = random.Random(mode.seed)
        logging.info(f"Fault mode set: {mode.to_json().decode('ascii')}")
        return make_response(200, mode.to_json(), (("Content-Type", "application/json"),))

    def retain(self, n: int):
        self.retained.append(bytearray(n))
        self.leaked_bytes += n

    def soft_reboot(self):
        """Drops everything the process accumulated; the fault mode survives."""
        self.retained.clear()
        self.leaked_bytes = 0
        self.arrivals.clear()
        logging.info("Soft reboot: retained allocations released.")

    def arrivals_last_second(self) -> int:
        return len(self.arrivals)

    # --- Requests ---

    def serve(self, request: HttpMessage) -> HttpMessage:
        """Answers one request. Raises FaultCrash when the active fault kills the process."""
        if request.path.startswith("/ctl/"):
            return self._control(request)

        self.hits += 1
        now = self.clock()
        self.arrivals.append(now)
        while self.arrivals and now - self.arrivals[0] >= 1.0:
            self.arrivals.popleft()

        if self.active is not None:
            replaced = self.active.before_request(request, self.mode.params, self)
            if replaced is not None:
                return replaced

        if request.path == "/health":
            return _text(200, "ok") if request.method == "GET" else _text(405, "method not allowed")
        if request.path == "/echo":
            if request.method != "POST":
                return _text(405, "method not allowed")
            return make_response(200, request.body, (("Content-Type", "application/octet-stream"),))
        if request.path == "/sort":
            return self._sort(request) if request.method == "POST" else _text(405, "method not allowed")
        return _text(404, "not found")

    def _sort(self, request: HttpMessage) -> HttpMessage:
        values = parse_int_list(request.body)
        if values is None:
            if self.active is not None:
                replaced = self.active.on_malformed_sort(request, self.mode.params, self)
                if replaced is not None:
                    return replaced
            return _text(400, "malformed integer list")

        result = sorted(values)
        if self.active is not None:
            corrupted = self.active.corrupt_sort(result, self.mode.params, self)
            if corrupted is not None:
                result = corrupted
        return make_response(200, ",".join(map(str, result)).encode("ascii"), (("Content-Type", "text/plain"),))

    def _control(self, request: HttpMessage) -> HttpMessage:
        route = (request.method, request.path)
        if route == ("POST", "/ctl/fault"):
            try:
                mode = parse_fault_mode(request.body, self.plugins)
            except ValueError as e:
                return _text(400, str(e))
            return self.set_fault(mode)
        if route == ("POST", "/ctl/usage"):
            return make_response(200, str(self.leaked_bytes).encode("ascii"), (("Content-Type", "text/plain"),))
        if route == ("POST", "/ctl/reboot"):
            self.soft_reboot()
            return _text(200, "rebooted")
        if route == ("GET", "/ctl/hits"):
            return make_response(200, str(self.hits).encode("ascii"), (("Content-Type", "text/plain"),))
        return _text(404, "not found")


class FixtureHandler(socketserver.BaseRequestHandler):
    """One request per connection; every response closes the connection."""

    def handle(self):
        server: FixtureServer = self.server
        self.request.settimeout(READ_TIMEOUT_S)
        try:
            request = MessageReader("request").read(self.request)
        except HttpParseError as e:
            self._send(_text(e.status, str(e)))
            return
        except OSError:
            return
        if request is None:
            return

        try:
            response = server.service.serve(request)
        except FaultCrash as e:
            server.crash(str(e))
            return
        self._send(response)

    def _send(self, response: HttpMessage):
        try:
            self.request.sendall(serialize_message(response.with_header("Connection", "close")))
        except OSError as e:
            # The interposer gave up on a hung request and closed its end.
            logging.debug(f"Client went away before the response: {e}")


class FixtureServer(socketserver.TCPServer):
    """
    Single-threaded: one connection is handled to completion before the next
    is accepted. A crash either kills the process (CLI) or, in-process, shuts
    the listener down so the port stops answering.
    """
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: FaultService, exit_on_crash: bool = False):
        super().__init__(address, FixtureHandler)
        self.service = service
        self.exit_on_crash = exit_on_crash
        self.crashed = threading.Event()

    @property
    def port(self) -> int:
        return self.server_address[1]

    def crash(self, reason: str):
        logging.error(f"Fixture crashed: {reason}")
        if self.exit_on_crash:
            logging.shutdown()
            os._exit(CRASH_EXIT_CODE)
        self.crashed.set()
        # shutdown() blocks until serve_forever returns, so it can't run on this thread.
        threading.Thread(target=self._die, name="fixture-crash", daemon=True).start()

    def _die(self):
        self.shutdown()
        self.server_close()

    def serve_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name=f"fixture-{self.port}", daemon=True)
        thread.start()
        return thread


def build_fixture(listen: tuple[str, int], seed: int = 0, exit_on_crash: bool = False,
                  sleep: Callable[[float], None] = time.sleep) -> FixtureServer:
    plugins = PluginManager()
    plugins.discover_plugins()
    return FixtureServer(listen, FaultService(plugins, seed, sleep), exit_on_crash)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="guardrail-faultsvc", description="Fault-injection upstream fixture.")
    parser.add_argument("--listen", required=True, help="host:port to listen on")
    parser.add_argument("--seed", type=int, default=0, help="seed for the default fault generator")
    args = parser.parse_args(argv)

    setup_logging()
    try:
        listen = parse_hostport(args.listen)
        server = build_fixture(listen, args.seed, exit_on_crash=True)
    except (ValueError, OSError) as e:
        logging.error(f"Cannot start fixture: {e}")
        return 1

    def _terminate(signum, frame):
        logging.info(f"Signal {signum} received; fixture shutting down.")
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _terminate)
    signal.signal(signal.SIGINT, _terminate)
    logging.info(f"Fault service listening on {listen[0]}:{server.port} "
                 f"(faults: {', '.join(server.service.plugins.kinds())})")
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
