# faults/crash_on_size/plugin.py
import logging

from errors import FaultCrash
from faults.api import FaultPlugin


class CrashOnSizeFault(FaultPlugin):
    """Dies on any body longer than threshold_bytes, like an overrun stack buffer."""

    @property
    def name(self) -> str:
        return "crash_on_size"

    @property
    def display_name(self) -> str:
        return "Crash on Oversize Input"

    @property
    def defaults(self) -> dict:
        return {"threshold_bytes": 1024}

    def before_request(self, request, params, service):
        if len(request.body) > params["threshold_bytes"]:
            logging.error(f"Body of {len(request.body)} bytes overruns {params['threshold_bytes']}; crashing.")
            raise FaultCrash(f"body longer than {params['threshold_bytes']} bytes")
        return None


def register():
    return CrashOnSizeFault()
