"""Self-management: events, fluents, and condition-to-action mappings.

Three policies run over the grid. Self-healing watches heartbeats and
throughput and replaces or recovers nodes; self-protection discards
unauthenticated frames and counts them; self-optimization re-negotiates
link protocols the moment a classification-stage demand is generated.

A fluent is active for a subject from its initiating event until a
terminating event for that subject; mapped actions fire once per
activation interval (edge-triggered).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .transport import NoCommonProtocol, ProtocolId, negotiate_protocol

INSECURE_MESSAGE_METRIC = "hereIsInsecurePublicMessage"

DEFAULT_HEARTBEAT_INTERVAL_MS = 1000
DEFAULT_MISS_K = 3
DEFAULT_LOW_PERF_WINDOW_MS = 5000

EVENT_VOCABULARY = (
    "lowPerformanceDetected", "performanceNormalized", "performanceNormFailed",
    "nodeDown", "nodeReplaced", "nodeReplacementFailed",
    "publicMessageIsComing", "publicMessageSecure", "publicMessageInsecure",
    "enteringClassificationStage", "optimizationSucceeded", "optimizationNotSucceeded",
    "recoveryStarted", "recoverySucceeded", "recoveryFailed",
    "nodeRegistered", "nodeStarted", "nodeStopped", "nodeKilled",
    "tierAllocated", "tierDeallocated", "tierReallocated",
    "evaluationStarted", "evaluationCompleted", "evaluationFailed", "protocolSwitched",
)


class UnknownEvent(KeyError):
    pass


class NoReplacementNode(RuntimeError):
    pass


class RecoveryFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    name: str
    subject: str
    at: int
    attributes: Dict[str, object] = field(default_factory=dict)

    def to_tree(self) -> dict:
        return {"name": self.name, "subject": self.subject, "at": self.at,
                "attributes": dict(self.attributes)}


@dataclass
class Fluent:
    name: str
    initiated_by: Set[str]
    terminated_by: Set[str]
    active_for: Dict[str, int] = field(default_factory=dict)

    def is_active(self, subject: str) -> bool:
        return subject in self.active_for


@dataclass(frozen=True)
class PolicyMapping:
    conditions: Tuple[str, ...]
    actions: Tuple[str, ...]


@dataclass(frozen=True)
class FluentChange:
    fluent: str
    subject: str
    change: str  # "activated" | "terminated"


@dataclass(frozen=True)
class ActionInvocation:
    action: str
    subject: str


@dataclass(frozen=True)
class SecurityVerdict:
    accepted: bool

    @property
    def is_discard(self) -> bool:
        return not self.accepted


ACCEPT = SecurityVerdict(accepted=True)
DISCARD = SecurityVerdict(accepted=False)


class Metric:
    def __init__(self, name: str, kind: str = "counter"):
        self.name = name
        self.kind = kind
        self.value = 0

    def increment(self, amount: int = 1):
        if self.kind == "counter" and amount < 0:
            raise ValueError("counters are monotone")
        self.value += amount

    def set(self, value):
        if self.kind == "counter" and value < self.value:
            raise ValueError("counters are monotone")
        self.value = value


class PolicyEngine:
    """Single-threaded condition core fed through a lock; actions are emitted
    in deterministic order and executed by whoever steps the engine."""

    def __init__(self, clock: Optional[Callable[[], int]] = None,
                 heartbeat_interval_ms: int = DEFAULT_HEARTBEAT_INTERVAL_MS,
                 miss_k: int = DEFAULT_MISS_K,
                 low_perf_window_ms: int = DEFAULT_LOW_PERF_WINDOW_MS):
        self._lock = threading.RLock()
        self._clock = clock or (lambda: int(time.time() * 1000))
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.miss_k = miss_k
        self.low_perf_window_ms = low_perf_window_ms
        self._events: Set[str] = set()
        self._fluents: Dict[str, Fluent] = {}
        self._actions: Set[str] = set()
        self._mappings: List[PolicyMapping] = []
        self._fired: Dict[Tuple[int, str], bool] = {}  # (mapping idx, subject)
        self.metrics: Dict[str, Metric] = {}
        self.history: List[Event] = []
        self._sinks: List[Callable[[Event], None]] = []
        self._down_nodes: Set[str] = set()
        self._slow_nodes: Set[str] = set()

    # -- registration --------------------------------------------------------

    def register_events(self, names: Iterable[str]):
        self._events.update(names)

    def register_fluent(self, fluent: Fluent):
        unknown = (fluent.initiated_by | fluent.terminated_by) - self._events
        if unknown:
            raise UnknownEvent("fluent %s references unregistered events %s"
                               % (fluent.name, sorted(unknown)))
        self._fluents[fluent.name] = fluent

    def register_action(self, name: str):
        self._actions.add(name)

    def register_mapping(self, mapping: PolicyMapping):
        for fluent_name in mapping.conditions:
            if fluent_name not in self._fluents:
                raise KeyError("mapping references unregistered fluent %r" % fluent_name)
        for action in mapping.actions:
            if action not in self._actions:
                raise KeyError("mapping references unregistered action %r" % action)
        self._mappings.append(mapping)

    def register_metric(self, name: str, kind: str = "counter") -> Metric:
        metric = self.metrics.setdefault(name, Metric(name, kind))
        return metric

    def add_sink(self, sink: Callable[[Event], None]):
        self._sinks.append(sink)

    # -- core ------------------------------------------------------------------

    def make_event(self, name: str, subject: str, **attributes) -> Event:
        return Event(name=name, subject=subject, at=self._clock(), attributes=attributes)

    def raise_event(self, event: Event) -> List[FluentChange]:
        """Update fluent activation per initiated_by/terminated_by; returns the
        changes. Re-initiating an already-active fluent is a no-op."""
        with self._lock:
            if event.name not in self._events:
                raise UnknownEvent("event %r is not in the registered vocabulary"
                                   % event.name)
            self.history.append(event)
            changes: List[FluentChange] = []
            for fluent in self._fluents.values():
                if event.name in fluent.initiated_by:
                    if event.subject not in fluent.active_for:
                        fluent.active_for[event.subject] = event.at
                        changes.append(FluentChange(fluent.name, event.subject, "activated"))
                elif event.name in fluent.terminated_by:
                    if event.subject in fluent.active_for:
                        del fluent.active_for[event.subject]
                        changes.append(FluentChange(fluent.name, event.subject, "terminated"))
                        for index, mapping in enumerate(self._mappings):
                            if fluent.name in mapping.conditions:
                                self._fired.pop((index, event.subject), None)
        for sink in self._sinks:
            sink(event)
        return changes

    def emit(self, name: str, subject: str, **attributes) -> Event:
        event = self.make_event(name, subject, **attributes)
        self.raise_event(event)
        return event

    def fluent_active(self, name: str, subject: str) -> bool:
        with self._lock:
            fluent = self._fluents.get(name)
            return bool(fluent and fluent.is_active(subject))

    def step_policies(self, grid_view=None) -> List[ActionInvocation]:
        """Emit each mapping's actions once per activation: a fluent that stays
        active across steps does not re-fire its actions."""
        with self._lock:
            invocations: List[ActionInvocation] = []
            for index, mapping in enumerate(self._mappings):
                subjects: Optional[Set[str]] = None
                for fluent_name in mapping.conditions:
                    active = set(self._fluents[fluent_name].active_for)
                    subjects = active if subjects is None else subjects & active
                for subject in sorted(subjects or ()):
                    if self._fired.get((index, subject)):
                        continue
                    self._fired[(index, subject)] = True
                    for action in mapping.actions:
                        invocations.append(ActionInvocation(action=action, subject=subject))
            return invocations

    # -- self-healing ----------------------------------------------------------

    def heartbeat_monitor(self, node_statuses: Sequence["NodeHealth"],
                          now: Optional[int] = None) -> List[Event]:
        """Raise nodeDown after K consecutive missed heartbeats and
        lowPerformanceDetected for alive-but-stalled nodes."""
        if now is None:
            now = self._clock()
        raised: List[Event] = []
        for health in node_statuses:
            if not health.started:
                self._down_nodes.discard(health.node_id)
                self._slow_nodes.discard(health.node_id)
                continue
            missed = (now - health.last_heartbeat_ms) // self.heartbeat_interval_ms
            if missed >= self.miss_k:
                if health.node_id not in self._down_nodes:
                    self._down_nodes.add(health.node_id)
                    raised.append(self.emit("nodeDown", health.node_id,
                                            missed_heartbeats=int(missed)))
                continue
            self._down_nodes.discard(health.node_id)
            stalled = (health.pending_demands > 0 and health.completed_in_window == 0
                       and health.window_ms >= self.low_perf_window_ms)
            if stalled:
                if health.node_id not in self._slow_nodes:
                    self._slow_nodes.add(health.node_id)
                    raised.append(self.emit("lowPerformanceDetected", health.node_id,
                                            pending=health.pending_demands))
            else:
                self._slow_nodes.discard(health.node_id)
        return raised

    # -- self-protection ---------------------------------------------------------

    def check_message_security(self, frame_verdict: str, sender: str) -> SecurityVerdict:
        """'ok' frames pass; any decode/authentication failure is discarded,
        counted, and never processed further."""
        counter = self.register_metric(INSECURE_MESSAGE_METRIC)
        self.emit("publicMessageIsComing", sender)
        if frame_verdict == "ok":
            self.emit("publicMessageSecure", sender)
            return ACCEPT
        counter.increment()
        self.emit("publicMessageInsecure", sender, reason=frame_verdict)
        return DISCARD


@dataclass(frozen=True)
class NodeHealth:
    node_id: str
    started: bool
    last_heartbeat_ms: int
    completed_in_window: int
    pending_demands: int
    window_ms: int = DEFAULT_LOW_PERF_WINDOW_MS


# ---------------------------------------------------------------------------
# Self-optimization


@dataclass(frozen=True)
class LinkStats:
    link_id: str
    current: ProtocolId
    local_caps: Tuple[ProtocolId, ...]
    remote_caps: Tuple[ProtocolId, ...]


@dataclass(frozen=True)
class ProtocolSwitch:
    changes: Tuple[Tuple[str, ProtocolId, ProtocolId], ...]  # (link, old, new)


_PROTOCOL_RANK = {ProtocolId.TCP_BINARY: 2, ProtocolId.TCP_TEXT: 1, ProtocolId.IN_PROC: 0}


def optimize_on_classification(engine: PolicyEngine, stage_name: str,
                               link_stats: Sequence[LinkStats],
                               subject: str = "pipeline") -> Optional[ProtocolSwitch]:
    """On entering the classification stage, re-negotiate every link and emit
    a switch for any that can run a higher-preference protocol."""
    if stage_name != "classification":
        return None
    engine.emit("enteringClassificationStage", subject, stage=stage_name)
    changes = []
    failed = False
    for link in link_stats:
        try:
            best = negotiate_protocol(set(link.local_caps), set(link.remote_caps))
        except NoCommonProtocol:
            failed = True
            continue
        if _PROTOCOL_RANK[best] > _PROTOCOL_RANK[link.current]:
            changes.append((link.link_id, link.current, best))
    if failed:
        engine.emit("optimizationNotSucceeded", subject)
    else:
        engine.emit("optimizationSucceeded", subject, switches=len(changes))
    if changes:
        return ProtocolSwitch(changes=tuple(changes))
    return None


# ---------------------------------------------------------------------------
# Self-healing plans (executed against the grid runtime)


@dataclass(frozen=True)
class ReplacementPlan:
    failed_node_id: str
    migrated: Tuple[Tuple[str, str, str], ...]  # (old tier, new tier, target node)


@dataclass(frozen=True)
class RecoveryPlan:
    node_id: str
    restarted: Tuple[str, ...]


def replace_node(gmt, failed_node_id: str) -> ReplacementPlan:
    """Re-allocate every tier of a failed node on the least-loaded live node
    and reclaim its workers' leases so stalled demands run elsewhere."""
    return gmt.replace_node(failed_node_id)


def recover_node(gmt, node_id: str) -> RecoveryPlan:
    """Restart a Started-but-stalled node's tiers with cloned configs; on
    failure the node is marked Suspected and replacement takes over."""
    return gmt.recover_node(node_id)


def default_engine(**kwargs) -> PolicyEngine:
    """Engine pre-loaded with the grid's vocabulary, fluents and mappings."""
    engine = PolicyEngine(**kwargs)
    engine.register_events(EVENT_VOCABULARY)
    engine.register_fluent(Fluent(
        name="inLowPerformance",
        initiated_by={"lowPerformanceDetected"},
        terminated_by={"performanceNormalized", "performanceNormFailed"}))
    engine.register_fluent(Fluent(
        name="inSecurityCheck",
        initiated_by={"publicMessageIsComing"},
        terminated_by={"publicMessageSecure", "publicMessageInsecure"}))
    engine.register_fluent(Fluent(
        name="inClassificationStage",
        initiated_by={"enteringClassificationStage"},
        terminated_by={"optimizationSucceeded", "optimizationNotSucceeded"}))
    engine.register_fluent(Fluent(
        name="inNodeFailure",
        initiated_by={"nodeDown"},
        terminated_by={"nodeReplaced", "nodeReplacementFailed"}))
    for action in ("startSelfHealing", "checkPublicMessage", "runGlobalOptimization",
                   "replaceFailedNode"):
        engine.register_action(action)
    engine.register_mapping(PolicyMapping(("inLowPerformance",), ("startSelfHealing",)))
    engine.register_mapping(PolicyMapping(("inSecurityCheck",), ("checkPublicMessage",)))
    engine.register_mapping(PolicyMapping(("inClassificationStage",),
                                          ("runGlobalOptimization",)))
    engine.register_mapping(PolicyMapping(("inNodeFailure",), ("replaceFailedNode",)))
    engine.register_metric(INSECURE_MESSAGE_METRIC)
    return engine
