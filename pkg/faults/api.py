# faults/api.py
from abc import ABC, abstractmethod

from typing import TYPE_CHECKING
if TYPE_CHECKING:
    from fault_service import FaultService
    from http_codec import HttpMessage


class FaultPlugin(ABC):
    """Base class for every fault kind the fixture can inject."""

    @property
    @abstractmethod
    def name(self) -> str:
        """Unique fault kind as it appears in FaultMode JSON (e.g., 'leak')."""
        pass

    @property
    @abstractmethod
    def display_name(self) -> str:
        pass

    @property
    def defaults(self) -> dict:
        return {}

    def validate(self, params: dict) -> dict:
        """
        Merges params over the defaults. Raises ValueError on unknown keys or
        values that are not positive numbers.
        """
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown params for '{self.name}': {', '.join(sorted(unknown))}")
        merged = {**self.defaults, **params}
        for key, value in merged.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
                raise ValueError(f"{self.name}.{key} must be a positive number")
        return merged

    def before_request(self, request: 'HttpMessage', params: dict,
                       service: 'FaultService') -> 'HttpMessage | None':
        """Runs ahead of routing. A returned message replaces the normal response."""
        return None

    def corrupt_sort(self, values: list[int], params: dict, service: 'FaultService') -> list[int] | None:
        """Gets the correctly sorted list; None leaves it alone."""
        return None

    def on_malformed_sort(self, request: 'HttpMessage', params: dict,
                          service: 'FaultService') -> 'HttpMessage | None':
        """None lets the fixture answer 400."""
        return None
