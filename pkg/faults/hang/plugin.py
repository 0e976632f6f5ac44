# faults/hang/plugin.py
from faults.api import FaultPlugin


class HangFault(FaultPlugin):
    @property
    def name(self) -> str:
        return "hang"

    @property
    def display_name(self) -> str:
        return "Hang"

    @property
    def defaults(self) -> dict:
        return {"delay_ms": 5000}

    def before_request(self, request, params, service):
        service.sleep(params["delay_ms"] / 1000.0)
        return None


def register():
    return HangFault()
