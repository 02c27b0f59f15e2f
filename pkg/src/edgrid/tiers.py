"""Tier vocabulary: registrations, the manager's info keeper, and the
generator/worker behaviors that move demands through a store.

The manager process (see runtime.GridRuntime) owns an InfoKeeper and the
live tier runtimes; everything here is the mechanism it drives.
"""

from __future__ import annotations

import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Set

from .config import Configuration
from .model import (
    Context,
    Demand,
    DemandResult,
    Geer,
    Value,
    canonical_signature,
    context_merge,
)
from .store import DepositStatus

_COLOR_RE = re.compile(r"^#[0-9a-f]{6}$")
_ADDRESS_RE = re.compile(r"^[A-Za-z0-9_.\-]+:\d{1,5}$")

DEFAULT_EVAL_TIMEOUT = 60.0
DEFAULT_LEASE_MS = 30_000
WORKER_IDLE_SLEEP = 0.01


class UnknownInstance(KeyError):
    pass


class BadAddress(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class NodeNotStarted(RuntimeError):
    pass


class NoDstAvailable(RuntimeError):
    pass


class IllegalTransition(RuntimeError):
    pass


class EvaluationTimeout(TimeoutError):
    pass


class StageFailed(RuntimeError):
    def __init__(self, stage_name: str, procedure_name: str, message: str):
        super().__init__("stage %r (procedure %r) failed: %s"
                         % (stage_name, procedure_name, message))
        self.stage_name = stage_name
        self.procedure_name = procedure_name


class TierKind(str, Enum):
    DGT = "DGT"
    DST = "DST"
    DWT = "DWT"
    GMT = "GMT"


class NodeStatus(str, Enum):
    REGISTERED = "Registered"
    STARTED = "Started"
    STOPPED = "Stopped"
    SUSPECTED = "Suspected"
    DEAD = "Dead"


@dataclass(frozen=True)
class GridInstance:
    instance_id: str
    instance_name: str


@dataclass
class NodeRegistration:
    node_id: str
    node_name: str
    address: str
    color: str
    registered_at: int
    status: NodeStatus = NodeStatus.REGISTERED

    def __post_init__(self):
        if not _COLOR_RE.match(self.color):
            raise ValueError("color must look like #rrggbb, got %r" % self.color)

    def to_tree(self) -> dict:
        return {"node_id": self.node_id, "node_name": self.node_name,
                "address": self.address, "color": self.color,
                "registered_at": self.registered_at, "status": self.status.value}


@dataclass
class TierRegistration:
    tier_id: str
    kind: TierKind
    node_id: str
    instance_count: int
    config: Configuration

    def __post_init__(self):
        if self.instance_count < 1:
            raise ValueError("instance_count must be >= 1")

    def to_tree(self) -> dict:
        return {"tier_id": self.tier_id, "kind": self.kind.value, "node_id": self.node_id,
                "instance_count": self.instance_count, "config": self.config.as_dict()}


class InfoKeeper:
    """The manager's registry: nodes, tiers, and the relations between them.

    Registries and relations are kept as separate sub-structures; removing a
    node or tier removes every relation that referenced it.
    """

    def __init__(self):
        self.node_registrations: List[NodeRegistration] = []
        self.tier_registrations: List[TierRegistration] = []
        self.node_system_relation: Dict[str, str] = {}   # node_id -> system DST tier
        self.dgt_dwt_registration: Dict[str, Optional[str]] = {}  # tier -> bound DST

    @property
    def dst_registrations(self) -> List[TierRegistration]:
        return [t for t in self.tier_registrations if t.kind is TierKind.DST]

    def node(self, node_id: str) -> Optional[NodeRegistration]:
        for reg in self.node_registrations:
            if reg.node_id == node_id:
                return reg
        return None

    def tier(self, tier_id: str) -> Optional[TierRegistration]:
        for reg in self.tier_registrations:
            if reg.tier_id == tier_id:
                return reg
        return None

    def tiers_on(self, node_id: str) -> List[TierRegistration]:
        return [t for t in self.tier_registrations if t.node_id == node_id]

    def save_node_registration(self, registration: NodeRegistration) -> bool:
        """Upsert by (name, address); returns True when an existing record
        was updated in place. Runtime status survives the update."""
        for index, existing in enumerate(self.node_registrations):
            if (existing.node_name == registration.node_name
                    and existing.address == registration.address):
                registration.node_id = existing.node_id
                registration.status = existing.status
                self.node_registrations[index] = registration
                return True
        self.node_registrations.append(registration)
        return False

    def remove_node(self, node_id: str):
        self.node_registrations = [r for r in self.node_registrations
                                   if r.node_id != node_id]
        self.node_system_relation.pop(node_id, None)
        for tier in self.tiers_on(node_id):
            self.remove_tier(tier.tier_id)

    def save_tier_registration(self, registration: TierRegistration):
        self.tier_registrations.append(registration)

    def remove_tier(self, tier_id: str) -> bool:
        before = len(self.tier_registrations)
        self.tier_registrations = [t for t in self.tier_registrations
                                   if t.tier_id != tier_id]
        self.dgt_dwt_registration.pop(tier_id, None)
        for node_id, dst_id in list(self.node_system_relation.items()):
            if dst_id == tier_id:
                del self.node_system_relation[node_id]
        for bound_id, dst_id in list(self.dgt_dwt_registration.items()):
            if dst_id == tier_id:
                self.dgt_dwt_registration[bound_id] = None
        return len(self.tier_registrations) < before

    def least_loaded_dst(self) -> Optional[str]:
        """DST with the fewest bound tiers, ties broken by tier id."""
        dsts = self.dst_registrations
        if not dsts:
            return None
        load = {t.tier_id: 0 for t in dsts}
        for dst_id in self.dgt_dwt_registration.values():
            if dst_id in load:
                load[dst_id] += 1
        return min(sorted(load), key=lambda tid: load[tid])

    def audit(self):
        """Referential integrity: every relation endpoint must exist."""
        node_ids = {r.node_id for r in self.node_registrations}
        tier_ids = {t.tier_id for t in self.tier_registrations}
        dst_ids = {t.tier_id for t in self.dst_registrations}
        for tier in self.tier_registrations:
            assert tier.node_id in node_ids, "tier %s on unknown node" % tier.tier_id
        for node_id, dst_id in self.node_system_relation.items():
            assert node_id in node_ids and dst_id in dst_ids
        for tier_id, dst_id in self.dgt_dwt_registration.items():
            assert tier_id in tier_ids
            assert dst_id is None or dst_id in dst_ids


# ---------------------------------------------------------------------------
# Worker tier behavior


class WorkerMetrics:
    """Shared execution counters for one worker tier."""

    def __init__(self):
        self._lock = threading.Lock()
        self.executions = 0
        self.failures = 0
        self.skipped = 0

    def record_execution(self, failed: bool):
        with self._lock:
            self.executions += 1
            if failed:
                self.failures += 1

    def record_skip(self):
        with self._lock:
            self.skipped += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {"executions": self.executions, "failures": self.failures,
                    "skipped": self.skipped}


def dwt_process_loop(worker_id: str, procedure_pool: Dict[str, Callable],
                     client, stop_event: threading.Event,
                     lease_ms: int = DEFAULT_LEASE_MS,
                     metrics: Optional[WorkerMetrics] = None,
                     clock: Optional[Callable[[], int]] = None):
    """Withdraw, execute, deposit, repeat until stopped.

    Demands whose procedure is outside this worker's pool are released back
    to the queue head for some other worker; a procedure that raises becomes
    a stored failure result and the loop keeps going.
    """
    if not procedure_pool:
        raise ValueError("procedure pool must be non-empty")
    metrics = metrics or WorkerMetrics()
    clock = clock or (lambda: int(time.time() * 1000))
    while not stop_event.is_set():
        try:
            demand = client.withdraw(worker_id, lease_ms=lease_ms)
        except Exception:
            if stop_event.is_set():
                return
            time.sleep(WORKER_IDLE_SLEEP)
            continue
        if demand is None:
            time.sleep(WORKER_IDLE_SLEEP)
            continue
        sig = canonical_signature(demand)
        name = demand.procedure_name if demand.kind.value == "Procedural" else None
        if name is None or name not in procedure_pool:
            client.release(sig, worker_id)
            metrics.record_skip()
            time.sleep(WORKER_IDLE_SLEEP)
            continue
        try:
            value = procedure_pool[name](list(demand.params))
            result = DemandResult(signature=sig, value=value, worker_id=worker_id,
                                  computed_at=clock())
            failed = False
        except Exception as exc:
            result = DemandResult(signature=sig, value=Value.of_text(""),
                                  worker_id=worker_id, computed_at=clock(),
                                  error="%s: %s" % (type(exc).__name__, exc))
            failed = True
        metrics.record_execution(failed)
        try:
            client.deposit_result(sig, result)
        except Exception:
            if stop_event.is_set():
                return


# ---------------------------------------------------------------------------
# Generator tier behavior


def dgt_evaluate(geer: Geer, initial_context: Context, client,
                 timeout: float = DEFAULT_EVAL_TIMEOUT,
                 known_procedures: Optional[Set[str]] = None,
                 stage_hook: Optional[Callable[[str, Demand], None]] = None,
                 generator_id: str = "dgt") -> DemandResult:
    """Walk the stage plan, one procedural demand per stage, each carrying the
    previous stage's value; blocks on the store until each result lands.

    Re-running with identical plan and context deposits the same signatures
    and is served entirely from the warehouse.
    """
    deadline = time.monotonic() + timeout
    previous: Optional[Value] = None
    result: Optional[DemandResult] = None
    for index, stage in enumerate(geer.plan):
        if known_procedures is not None and stage.procedure_name not in known_procedures:
            raise StageFailed(stage.stage_name, stage.procedure_name,
                              "no worker pool registers this procedure")
        params = list(stage.param_template)
        if previous is not None:
            params.append(previous)
        context = context_merge(initial_context, Context({"stage": index}))
        demand = Demand.procedural(geer.geer_id, geer.program_id, stage.procedure_name,
                                   params=params, context=context)
        if stage_hook is not None:
            stage_hook(stage.stage_name, demand)
        outcome = client.deposit_demand(demand)
        sig = canonical_signature(demand)
        if outcome.status is DepositStatus.CACHED:
            result = outcome.result
        else:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise EvaluationTimeout("evaluation budget exhausted at stage %r"
                                        % stage.stage_name)
            result = client.wait_for_result(sig, remaining, requester_id=generator_id)
            if result is None:
                raise EvaluationTimeout("no result for stage %r within %.1fs"
                                        % (stage.stage_name, timeout))
        if result.error is not None:
            raise StageFailed(stage.stage_name, stage.procedure_name, result.error)
        previous = result.value
    return result
