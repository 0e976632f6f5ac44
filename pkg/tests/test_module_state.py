import logging

import pytest
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from events import EventBus
from module_state import TRANSITIONS, ModuleEvent, ModuleState, ModuleStateMachine, State, transition


@pytest.mark.parametrize("start, event, end", [
    (State.RUNNING, ModuleEvent.VIOLATION_THRESHOLD, State.SUSPENDED),
    (State.SUSPENDED, ModuleEvent.REBOOT_TIMER, State.REBOOTING),
    (State.REBOOTING, ModuleEvent.REBOOT_DONE, State.RUNNING),
    (State.RUNNING, ModuleEvent.STOP_COMMAND, State.STOPPED),
    (State.SUSPENDED, ModuleEvent.STOP_COMMAND, State.STOPPED),
])
def test_legal_transitions(start, event, end):
    result = transition(ModuleState(start, 0), event, now=42)
    assert result == ModuleState(end, 42)


def test_illegal_event_is_ignored_with_warning(caplog):
    state = ModuleState(State.RUNNING, 7)
    with caplog.at_level(logging.WARNING):
        assert transition(state, ModuleEvent.REBOOT_DONE, now=9) is state
    assert "Ignoring illegal event 'reboot_done'" in caplog.text


def test_stopped_absorbs_every_event():
    stopped = ModuleState(State.STOPPED, 1)
    for event in ModuleEvent:
        assert transition(stopped, event, now=2) is stopped


def test_rebooting_ignores_stop_command():
    rebooting = ModuleState(State.REBOOTING, 1)
    assert transition(rebooting, ModuleEvent.STOP_COMMAND) is rebooting


def test_machine_publishes_applied_transitions_only():
    bus, changes = EventBus(), []
    bus.subscribe("state:module_changed", lambda old, new, reason: changes.append((old.state, new.state, reason)))
    machine = ModuleStateMachine(bus, ModuleState(State.RUNNING, 0))
    machine.fire(ModuleEvent.VIOLATION_THRESHOLD, "guard", now=10)
    machine.fire(ModuleEvent.REBOOT_DONE, now=11)
    assert changes == [(State.RUNNING, State.SUSPENDED, "guard")]
    assert machine.current == ModuleState(State.SUSPENDED, 10)
    assert not machine.is_running


class ModuleLifecycle(RuleBasedStateMachine):
    """Random event walks against the transition table as a model."""

    def __init__(self):
        super().__init__()
        self.bus = EventBus()
        self.published = []
        self.bus.subscribe("state:module_changed", lambda old, new, reason: self.published.append(new.state))
        self.machine = ModuleStateMachine(self.bus, ModuleState(State.RUNNING, 0))
        self.model = State.RUNNING
        self.expected_publications = 0
        self.now = 0

    @rule(event=st.sampled_from(list(ModuleEvent)))
    def fire(self, event):
        self.now += 1
        self.machine.fire(event, now=self.now)
        target = TRANSITIONS.get((self.model, event))
        if target is not None:
            self.model = target
            self.expected_publications += 1

    @invariant()
    def matches_model(self):
        assert self.machine.current.state is self.model

    @invariant()
    def publishes_once_per_transition(self):
        assert len(self.published) == self.expected_publications

    @invariant()
    def stopped_is_final(self):
        if State.STOPPED in self.published:
            assert self.published[-1] is State.STOPPED


TestModuleLifecycle = ModuleLifecycle.TestCase
