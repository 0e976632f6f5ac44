# utils.py
import os
import re
import math
import time
import threading
import logging
from collections import deque
from decimal import Decimal

# --- Centralized Logging System ---

LOG_LEVEL_ENV = "GUARDRAIL_LOG_LEVEL"
LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def setup_logging(level_name: str | None = None):
    """Configures the root logger once. The level comes from GUARDRAIL_LOG_LEVEL unless given."""
    requested = (level_name or os.environ.get(LOG_LEVEL_ENV, "info")).strip().lower()
    level = LOG_LEVELS.get(requested)

    formatter = logging.Formatter('%(asctime)s [%(levelname)s] %(message)s', datefmt='%H:%M:%S')
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)

    logger = logging.getLogger()
    logger.setLevel(level if level is not None else logging.INFO)
    if not logger.handlers:
        logger.addHandler(console_handler)

    if level is None:
        logging.warning(f"Unknown {LOG_LEVEL_ENV} value '{requested}', using 'info'.")


class LineLog:
    """
    Append-only text log, one record per line. Keeps the most recent lines in
    memory so tests and the CLI can inspect them without reading the file back.
    """

    def __init__(self, path: str | None = None, maxlen: int = 10000):
        self.path = path
        self.lines = deque(maxlen=maxlen)
        self._lock = threading.Lock()
        self._file = open(path, "a", encoding="utf-8") if path else None

    def append(self, line: str):
        with self._lock:
            self.lines.append(line)
            if self._file:
                self._file.write(line + "\n")
                self._file.flush()

    def get_lines(self) -> list[str]:
        with self._lock:
            return list(self.lines)

    def close(self):
        with self._lock:
            if self._file:
                self._file.close()
                self._file = None


# --- Clock helpers ---

def now_ms() -> int:
    """Wall-clock unix milliseconds, used for log lines and window arithmetic."""
    return int(time.time() * 1000)


def monotonic_ms() -> int:
    return int(time.monotonic() * 1000)


def ceil_scaled(count: int | float, factor: float) -> int:
    """ceil(count * factor) computed in decimal so 100 * 1.2 is exactly 120."""
    return math.ceil(Decimal(str(count)) * Decimal(str(factor)))


INT_TOKEN = re.compile(r"-?[0-9]+")


def parse_int_list(body: bytes) -> list[int] | None:
    """Comma-separated decimal integers; None when the body is not such a list."""
    if not body.isascii():
        return None
    text = body.decode("ascii").strip()
    if not text:
        return []
    parts = [part.strip() for part in text.split(",")]
    if not all(INT_TOKEN.fullmatch(part) for part in parts):
        return None
    try:
        return [int(part) for part in parts]
    except ValueError:
        # Beyond the interpreter's int string conversion limit.
        return None


# --- Config files and addresses ---

def load_config(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def save_config(path: str, data: bytes):
    try:
        with open(path, "wb") as f:
            f.write(data)
    except OSError as e:
        logging.error(f"Error saving config to {path}: {e}")
        raise


def parse_hostport(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected <host:port>, got '{value}'")
    return host or "127.0.0.1", int(port)
