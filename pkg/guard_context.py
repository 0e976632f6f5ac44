# guard_context.py
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

from events import EventBus
from fuse_engine import FuseEngine
from invariant_model import InvariantSpec
from module_state import ModuleStateMachine
from resource_cop import ResourceCop
from task_queue import TaskQueue
from utils import LineLog

if TYPE_CHECKING:
    from interposer import UpstreamSupervisor


@dataclass
class GuardContext:
    """
    Everything that guards one upstream, wired to one event bus. The
    interposer, its reboot controller and the CLI all reach the components
    through this bundle instead of constructing their own.
    """
    spec: InvariantSpec
    upstream: tuple[str, int]
    event_bus: EventBus
    state_machine: ModuleStateMachine
    fuses: FuseEngine
    cop: ResourceCop
    control_queue: TaskQueue
    decision_log: LineLog
    guard_log: LineLog
    traffic_log: LineLog | None = None
    supervisor: 'UpstreamSupervisor | None' = None

    def start(self):
        self.control_queue.start()
        self.cop.start()
        if self.supervisor is not None:
            self.supervisor.start()
            self.cop.task_queue.call_every(self.cop.tick_ms / 1000.0, "supervisor check", self.supervisor.check)

    def stop(self):
        self.cop.stop()
        self.control_queue.stop()
        if self.supervisor is not None:
            self.supervisor.stop()
        for log in (self.decision_log, self.guard_log, self.traffic_log):
            if log is not None:
                log.close()

    def retry_after_s(self) -> int:
        """Seconds a client should wait while the upstream is out of service."""
        return max(1, -(-self.spec.failstop.reboot_delay_ms // 1000))


def build_context(spec: InvariantSpec, upstream: tuple[str, int], event_bus: EventBus | None = None,
                  usage_source: Callable[[], int | None] | None = None, tick_ms: int = 50,
                  decision_log: str | None = None, guard_log: str | None = None,
                  traffic_log: str | None = None,
                  supervisor: 'UpstreamSupervisor | None' = None) -> GuardContext:
    event_bus = event_bus or EventBus()
    decisions = LineLog(decision_log)
    return GuardContext(
        spec=spec,
        upstream=upstream,
        event_bus=event_bus,
        state_machine=ModuleStateMachine(event_bus),
        fuses=FuseEngine(spec.input_rules, event_bus, decisions),
        cop=ResourceCop(spec.resource_rules, event_bus, TaskQueue(event_bus, "resource-cop"),
                        usage_source, tick_ms),
        control_queue=TaskQueue(event_bus, "reboot-controller"),
        decision_log=decisions,
        guard_log=LineLog(guard_log),
        traffic_log=LineLog(traffic_log) if traffic_log else None,
        supervisor=supervisor,
    )
