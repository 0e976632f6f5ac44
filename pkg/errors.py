# errors.py


class GuardrailError(Exception):
    """Base class for every error raised by guardrail components."""


class ConfigError(GuardrailError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class SpecViolationError(GuardrailError):
    """Raised by parse_config when the parsed spec breaks its own invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ClockRegressionError(GuardrailError):
    pass


class InsufficientSamplesError(GuardrailError):
    pass


class EmptySummaryError(GuardrailError):
    pass


class EmptySamplesError(GuardrailError):
    pass


class HttpParseError(GuardrailError):
    """
    Raised by the strict HTTP framer. `status` is the code the interposer
    answers with when it generates the error locally.
    """

    def __init__(self, message: str, status: int = 400):
        self.status = status
        super().__init__(message)


class UpstreamError(GuardrailError):
    reason = "upstream"


class UpstreamConnectError(UpstreamError):
    reason = "connect"


class UpstreamTimeoutError(UpstreamError):
    reason = "timeout"


class UpstreamProtocolError(UpstreamError):
    reason = "protocol"


class FaultCrash(GuardrailError):
    """The fault fixture decided to die. The server turns this into process death."""
