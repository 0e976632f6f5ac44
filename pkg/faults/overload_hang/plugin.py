# faults/overload_hang/plugin.py
from faults.api import FaultPlugin


class OverloadHangFault(FaultPlugin):
    """
    Collapses under load: once more than capacity_per_s requests arrived in
    the trailing second, each further request hangs for delay_ms.
    """

    @property
    def name(self) -> str:
        return "overload_hang"

    @property
    def display_name(self) -> str:
        return "Hang under Overload"

    @property
    def defaults(self) -> dict:
        return {"capacity_per_s": 50, "delay_ms": 2000}

    def before_request(self, request, params, service):
        if service.arrivals_last_second() > params["capacity_per_s"]:
            service.sleep(params["delay_ms"] / 1000.0)
        return None


def register():
    return OverloadHangFault()
