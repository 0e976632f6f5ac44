# faults/reject_malformed_off/plugin.py
import logging

from errors import FaultCrash
from faults.api import FaultPlugin


class RejectMalformedOffFault(FaultPlugin):
    """The sorter's parser no longer rejects bad input; it crashes on it."""

    @property
    def name(self) -> str:
        return "reject_malformed_off"

    @property
    def display_name(self) -> str:
        return "Crash on Malformed Input"

    def on_malformed_sort(self, request, params, service):
        logging.error("Malformed integer list reached the parser; crashing.")
        raise FaultCrash("malformed integer list")


def register():
    return RejectMalformedOffFault()
