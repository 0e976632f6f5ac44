# http_codec.py
"""
Strict framing for the HTTP/1.1 subset spoken on both sides of the
interposer: CRLF line endings, GET and POST only, Content-Length bodies only
(no chunked transfer coding), bounded request line, header count and header
line length. The parser is incremental: it answers NEED_MORE until a whole
message is buffered.
"""
import re
import time
import socket
from dataclasses import dataclass, field, replace

from errors import HttpParseError

MAX_LINE_BYTES = 8 * 1024
MAX_HEADERS = 64
MAX_BODY_BYTES = 16 * 1024 * 1024
METHODS = ("GET", "POST")

TOKEN = re.compile(rb"[!#$%&'*+\-.^_`|~0-9A-Za-z]+")
VERSION = re.compile(rb"HTTP/1\.[01]")
DIGITS = re.compile(rb"[0-9]{1,10}")
STATUS_CODE = re.compile(rb"[1-5][0-9]{2}")

REASONS = {
    200: "OK", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
    413: "Payload Too Large", 429: "Too Many Requests", 431: "Request Header Fields Too Large",
    500: "Internal Server Error", 501: "Not Implemented", 502: "Bad Gateway",
    503: "Service Unavailable", 504: "Gateway Timeout",
}


class NeedMore:
    def __repr__(self):
        return "NEED_MORE"


NEED_MORE = NeedMore()


@dataclass(frozen=True)
class HttpMessage:
    method: str | None = None
    target: str | None = None
    status: int | None = None
    reason: str = ""
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    version: str = "HTTP/1.1"
    raw_length: int = field(default=0, compare=False)

    @property
    def is_request(self) -> bool:
        return self.method is not None

    @property
    def path(self) -> str:
        return (self.target or "").split("?", 1)[0]

    def header(self, name: str) -> str | None:
        lowered = name.lower()
        return next((v for k, v in self.headers if k.lower() == lowered), None)

    def with_header(self, name: str, value: str) -> "HttpMessage":
        lowered = name.lower()
        headers = tuple((k, v) for k, v in self.headers if k.lower() != lowered) + ((name, value),)
        return replace(self, headers=headers)

    @property
    def keep_alive(self) -> bool:
        connection = (self.header("Connection") or "").lower()
        if self.version == "HTTP/1.0":
            return connection == "keep-alive"
        return connection != "close"


def _check_line(line: bytes, what: str):
    if len(line) > MAX_LINE_BYTES:
        raise HttpParseError(f"{what} longer than {MAX_LINE_BYTES} bytes", 431)
    if b"\n" in line or b"\r" in line:
        raise HttpParseError(f"bare CR or LF in {what}")
    if not line.isascii():
        raise HttpParseError(f"non-ASCII bytes in {what}")


def _check_partial(tail: bytes, what: str):
    # Called when no CRLF was found in tail.
    if b"\n" in tail:
        raise HttpParseError(f"bare LF in {what}")
    if len(tail) > MAX_LINE_BYTES + 1:
        raise HttpParseError(f"{what} longer than {MAX_LINE_BYTES} bytes", 431)


def _parse_request_line(line: bytes) -> dict:
    parts = line.split(b" ")
    if len(parts) != 3:
        raise HttpParseError("malformed request line")
    method, target, version = parts
    if method.decode("ascii") not in METHODS:
        raise HttpParseError(f"method not allowed: {method[:16]!r}")
    if not target.startswith(b"/") or any(b < 0x21 or b > 0x7E for b in target):
        raise HttpParseError("malformed request target")
    if not VERSION.fullmatch(version):
        raise HttpParseError("unsupported HTTP version")
    return {"method": method.decode("ascii"), "target": target.decode("ascii"), "version": version.decode("ascii")}


def _parse_status_line(line: bytes) -> dict:
    parts = line.split(b" ", 2)
    if len(parts) < 2 or not VERSION.fullmatch(parts[0]) or not STATUS_CODE.fullmatch(parts[1]):
        raise HttpParseError("malformed status line")
    reason = parts[2] if len(parts) == 3 else b""
    if any((b < 0x20 and b != 0x09) or b == 0x7F for b in reason):
        raise HttpParseError("control bytes in reason phrase")
    return {"version": parts[0].decode("ascii"), "status": int(parts[1]), "reason": reason.decode("ascii")}


def _parse_header(line: bytes) -> tuple[str, str]:
    name, sep, value = line.partition(b":")
    if not sep or not TOKEN.fullmatch(name):
        raise HttpParseError("malformed header line")
    value = value.strip(b" \t")
    if any((b < 0x20 and b != 0x09) or b == 0x7F for b in value):
        raise HttpParseError("control bytes in header value")
    return name.decode("ascii"), value.decode("ascii")


def _content_length(headers: list[tuple[str, str]], max_body: int) -> int | None:
    if any(k.lower() == "transfer-encoding" for k, _ in headers):
        raise HttpParseError("transfer codings are not supported", 501)
    values = [v for k, v in headers if k.lower() == "content-length"]
    if not values:
        return None
    if len(values) > 1:
        raise HttpParseError("duplicate Content-Length")
    if not DIGITS.fullmatch(values[0].encode("ascii")):
        raise HttpParseError("invalid Content-Length")
    length = int(values[0])
    if length > max_body:
        raise HttpParseError(f"body of {length} bytes exceeds {max_body}", 413)
    return length


@dataclass(frozen=True)
class _Head:
    fields: dict
    headers: tuple[tuple[str, str], ...]
    body_start: int
    length: int


def _parse_head(data: bytes | bytearray, kind: str, max_body: int) -> "_Head | NeedMore":
    what = "request line" if kind == "request" else "status line"
    end = data.find(b"\r\n")
    if end < 0:
        _check_partial(data, what)
        return NEED_MORE
    start_line = data[:end]
    _check_line(start_line, what)
    fields = _parse_request_line(start_line) if kind == "request" else _parse_status_line(start_line)

    pos = end + 2
    headers: list[tuple[str, str]] = []
    while True:
        end = data.find(b"\r\n", pos)
        if end < 0:
            _check_partial(data[pos:], "header line")
            return NEED_MORE
        line = data[pos:end]
        pos = end + 2
        if not line:
            break
        _check_line(line, "header line")
        if len(headers) >= MAX_HEADERS:
            raise HttpParseError(f"more than {MAX_HEADERS} headers", 431)
        headers.append(_parse_header(line))

    length = _content_length(headers, max_body)
    if length is None:
        if kind == "response" and not (fields["status"] < 200 or fields["status"] in (204, 304)):
            raise HttpParseError("response without Content-Length")
        length = 0
    return _Head(fields, tuple(headers), pos, length)


def _assemble(data: bytes | bytearray, head: "_Head") -> HttpMessage | NeedMore:
    if len(data) - head.body_start < head.length:
        return NEED_MORE
    end = head.body_start + head.length
    return HttpMessage(headers=head.headers, body=bytes(data[head.body_start:end]), raw_length=end, **head.fields)


def parse_message(data: bytes, kind: str = "request", max_body: int = MAX_BODY_BYTES) -> HttpMessage | NeedMore:
    """
    Parses one message from the front of data.

    Returns:
        HttpMessage (raw_length = bytes consumed) or NEED_MORE.
    Raises:
        HttpParseError for anything outside the accepted subset.
    """
    head = _parse_head(data, kind, max_body)
    if head is NEED_MORE:
        return NEED_MORE
    return _assemble(data, head)


def serialize_message(message: HttpMessage) -> bytes:
    """Wire bytes; Content-Length is always (re)written for responses and bodies."""
    if message.is_request:
        start = f"{message.method} {message.target} {message.version}"
    else:
        start = f"{message.version} {message.status} {message.reason}"
    headers = [(k, v) for k, v in message.headers if k.lower() != "content-length"]
    if message.body or not message.is_request or message.method == "POST":
        headers.append(("Content-Length", str(len(message.body))))
    head = start + "\r\n" + "".join(f"{k}: {v}\r\n" for k, v in headers) + "\r\n"
    return head.encode("ascii") + message.body


def make_response(status: int, body: bytes = b"", headers: tuple[tuple[str, str], ...] = (),
                  reason: str | None = None) -> HttpMessage:
    return HttpMessage(status=status, reason=reason or REASONS.get(status, "Unknown"),
                       headers=tuple(headers) + (("Content-Length", str(len(body))),), body=body)


def make_request(method: str, target: str, body: bytes = b"",
                 headers: tuple[tuple[str, str], ...] = ()) -> HttpMessage:
    if body or method == "POST":
        headers = tuple(headers) + (("Content-Length", str(len(body))),)
    return HttpMessage(method=method, target=target, headers=tuple(headers), body=body)


class MessageReader:
    """
    Buffers a socket and yields whole messages, keeping any pipelined surplus.
    The head is parsed once; body bytes are only counted until complete.
    """

    def __init__(self, kind: str = "request", max_body: int = MAX_BODY_BYTES):
        self.kind = kind
        self.max_body = max_body
        self.buffer = bytearray()
        self._head: _Head | None = None

    def _next_message(self) -> HttpMessage | None:
        if self._head is None:
            head = _parse_head(self.buffer, self.kind, self.max_body)
            if head is NEED_MORE:
                return None
            self._head = head
        message = _assemble(self.buffer, self._head)
        if message is NEED_MORE:
            return None
        del self.buffer[:message.raw_length]
        self._head = None
        return message

    def read(self, sock: socket.socket, deadline: float | None = None) -> HttpMessage | None:
        """
        Returns the next message, or None on a clean EOF between messages.
        Raises TimeoutError once the monotonic deadline passes.
        """
        while True:
            if self.buffer:
                message = self._next_message()
                if message is not None:
                    return message
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("deadline passed while reading")
                sock.settimeout(remaining)
            chunk = sock.recv(65536)
            if not chunk:
                if self.buffer:
                    raise HttpParseError("connection closed mid-message")
                return None
            self.buffer += chunk
