# module_state.py
import threading
import logging
from dataclasses import dataclass
from enum import Enum

from events import EventBus
from utils import now_ms


class State(str, Enum):
    RUNNING = "Running"
    SUSPENDED = "Suspended"
    REBOOTING = "Rebooting"
    STOPPED = "Stopped"


class ModuleEvent(str, Enum):
    VIOLATION_THRESHOLD = "violation_threshold"
    REBOOT_TIMER = "reboot_timer"
    REBOOT_DONE = "reboot_done"
    STOP_COMMAND = "stop_command"


@dataclass(frozen=True)
class ModuleState:
    state: State = State.RUNNING
    since: int = 0


TRANSITIONS: dict[tuple[State, ModuleEvent], State] = {
    (State.RUNNING, ModuleEvent.VIOLATION_THRESHOLD): State.SUSPENDED,
    (State.SUSPENDED, ModuleEvent.REBOOT_TIMER): State.REBOOTING,
    (State.REBOOTING, ModuleEvent.REBOOT_DONE): State.RUNNING,
    (State.RUNNING, ModuleEvent.STOP_COMMAND): State.STOPPED,
    (State.SUSPENDED, ModuleEvent.STOP_COMMAND): State.STOPPED,
}


def transition(state: ModuleState, event: ModuleEvent, now: int | None = None) -> ModuleState:
    """
    Applies the legal-transition table. Illegal pairs leave the state
    unchanged and log a warning; Stopped absorbs every event.
    """
    target = TRANSITIONS.get((state.state, ModuleEvent(event)))
    if target is None:
        logging.warning(f"Ignoring illegal event '{ModuleEvent(event).value}' in state {state.state.value}")
        return state
    return ModuleState(target, now_ms() if now is None else now)


class ModuleStateMachine:
    """
    Observable holder of one upstream's ModuleState. Every applied
    transition publishes `state:module_changed` with the old and new state.
    """

    def __init__(self, event_bus: EventBus, initial: ModuleState | None = None):
        self.event_bus = event_bus
        self._state = initial or ModuleState(State.RUNNING, now_ms())
        self._lock = threading.Lock()

    @property
    def current(self) -> ModuleState:
        with self._lock:
            return self._state

    @property
    def is_running(self) -> bool:
        return self.current.state is State.RUNNING

    def fire(self, event: ModuleEvent, reason: str = "", now: int | None = None) -> ModuleState:
        with self._lock:
            old = self._state
            new = transition(old, event, now)
            self._state = new
        if new is not old:
            logging.info(f"Upstream {old.state.value} -> {new.state.value} "
                         f"({ModuleEvent(event).value}{': ' + reason if reason else ''})")
            self.event_bus.publish("state:module_changed", old, new, reason)
        return new
