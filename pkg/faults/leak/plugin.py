# faults/leak/plugin.py
from faults.api import FaultPlugin


def is_leak_trigger(body: bytes) -> bool:
    """True when the body holds a line consisting of a lone linefeed."""
    return body == b"\n" or body.startswith(b"\n") or b"\n\n" in body


class LeakFault(FaultPlugin):
    """Retains bytes_per_trigger bytes for every request carrying an empty line."""

    @property
    def name(self) -> str:
        return "leak"

    @property
    def display_name(self) -> str:
        return "Linefeed Leak"

    @property
    def defaults(self) -> dict:
        return {"bytes_per_trigger": 80}

    def validate(self, params: dict) -> dict:
        merged = super().validate(params)
        if not isinstance(merged["bytes_per_trigger"], int):
            raise ValueError("leak.bytes_per_trigger must be an integer")
        return merged

    def before_request(self, request, params, service):
        if is_leak_trigger(request.body):
            service.retain(params["bytes_per_trigger"])
        return None


def register():
    return LeakFault()
