# events.py
from typing import Callable, Dict, List
import threading
import logging


class EventBus:
    """
    A thread-safe publisher-subscriber bus connecting the fuse engine, the
    resource cop, the output guard and the interposer's reboot controller.

    Event names used across the package:
        state:module_changed   (old: ModuleState, new: ModuleState)
        fuse:decision          (decision: Decision)
        guard:verdict          (verdict: GuardVerdict)
        cop:budget_exceeded    (budget: Budget)
        cop:planned_reboot     (forecast: ExhaustionForecast)
        cop:lease_expired      (lease: Lease)
        upstream:died          (returncode: int | None)
    """

    def __init__(self):
        self.listeners: Dict[str, List[Callable]] = {}
        self._lock = threading.Lock()

    def subscribe(self, event_type: str, fn: Callable):
        with self._lock:
            self.listeners.setdefault(event_type, []).append(fn)

    def unsubscribe(self, event_type: str, fn: Callable):
        with self._lock:
            handlers = self.listeners.get(event_type, [])
            if fn in handlers:
                handlers.remove(fn)

    def publish(self, event_type: str, *args, **kwargs):
        """
        Calls every subscriber of event_type in subscription order. A failing
        subscriber is logged and does not prevent the others from running.
        """
        with self._lock:
            handlers = list(self.listeners.get(event_type, []))
        for fn in handlers:
            try:
                fn(*args, **kwargs)
            except Exception as e:
                logging.error(f"Error in event handler for '{event_type}': {e}", exc_info=True)
