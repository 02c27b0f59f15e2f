"""The manager process: hosts tiers, runs the policies, owns the grid.

A GridRuntime plays the manager tier for one instance. Nodes register with
it, tiers are allocated onto started nodes as in-process runtimes (a store
plus optional transport server for a store tier, worker threads for a
worker tier, a generator handle for a generator tier), and a monitor loop
feeds heartbeat and throughput observations to the policy engine, whose
actions come back here as node recovery, node replacement, and link
re-negotiation.

Everything mutating goes through one lock; snapshots are consistent.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from . import autonomic, tiers
from .autonomic import (
    LinkStats,
    NodeHealth,
    NoReplacementNode,
    PolicyEngine,
    RecoveryFailed,
    RecoveryPlan,
    ReplacementPlan,
    default_engine,
    optimize_on_classification,
)
from .config import Configuration
from .marf import plan as marf_plan
from .model import Context, Demand, Geer, SignatureKey, canonical_signature
from .store import DemandStore, recover as store_recover
from .tiers import (
    DEFAULT_LEASE_MS,
    EvaluationTimeout,
    GridInstance,
    IllegalTransition,
    InfoKeeper,
    NodeNotStarted,
    NodeRegistration,
    NodeStatus,
    NoDstAvailable,
    StageFailed,
    TierKind,
    TierRegistration,
    UnknownInstance,
    UnknownNode,
    WorkerMetrics,
    dgt_evaluate,
    dwt_process_loop,
)
from .transport import (
    LocalStoreClient,
    ProtocolId,
    RemoteStoreClient,
    TransportServer,
    connect_store,
)

log = logging.getLogger(__name__)

DEFAULT_SECRET = "edgrid-dev-secret"


class UnknownTier(KeyError):
    pass


class UnknownEvaluation(KeyError):
    pass


# ---------------------------------------------------------------------------
# Tier runtimes


class DstRuntime:
    """A hosted store tier: the store itself, optional WAL, optional TCP
    transport agent, and a lease-expiry pump."""

    def __init__(self, tier_id: str, config: Configuration, secret: bytes,
                 security_monitor=None, deposit_observer=None):
        self.tier_id = tier_id
        self.config = config
        wal_path = config.get("dst.wal.path")
        if wal_path:
            self.store = store_recover(wal_path)
        else:
            self.store = DemandStore()
        self.server: Optional[TransportServer] = None
        if config.get("dst.serve") == "tcp":
            host, _, port = (config.get("dst.bind", "127.0.0.1:0")).partition(":")
            self.server = TransportServer(
                self.store, secret, host=host, port=int(port or 0),
                security_monitor=security_monitor,
                deposit_observer=deposit_observer).start()
        self._stop = threading.Event()
        interval = config.get_int("dst.expiry_interval_ms", 250) / 1000.0
        self._expiry = threading.Thread(target=self._expire_loop, args=(interval,),
                                        name="%s-expiry" % tier_id, daemon=True)
        self._expiry.start()

    @property
    def address(self) -> Optional[Tuple[str, int]]:
        return self.server.address if self.server else None

    def _expire_loop(self, interval: float):
        while not self._stop.wait(interval):
            try:
                self.store.expire_leases()
            except Exception:
                log.exception("lease expiry failed on %s", self.tier_id)

    def stop(self):
        self._stop.set()
        if self.server is not None:
            self.server.stop()
        self.store.close()

    def metrics(self) -> dict:
        snap = self.store.state_snapshot()
        counters = dict(snap["counters"])
        counters.update({"pending": len(snap["pending"]),
                         "in_flight": len(snap["in_flight"]),
                         "warehouse": len(snap["warehouse"])})
        return counters


class DwtRuntime:
    """A hosted worker tier: instance_count worker threads over one pool."""

    def __init__(self, tier_id: str, config: Configuration, pool: dict,
                 client_factory: Callable[[], object], lease_ms: int):
        self.tier_id = tier_id
        self.config = config
        self.pool = pool
        self.client_factory = client_factory
        self.lease_ms = lease_ms
        self.metrics = WorkerMetrics()
        self.instance_count = config.get_int("tier.instances", 1)
        self.worker_ids = ["%s#%d" % (tier_id, i) for i in range(self.instance_count)]
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self._clients: List[object] = []

    def start(self):
        self._stop.set()  # retire any previous generation of workers first
        self._stop = threading.Event()
        self._threads = []
        self._clients = []
        for worker_id in self.worker_ids:
            client = self.client_factory()
            self._clients.append(client)
            thread = threading.Thread(
                target=dwt_process_loop, name=worker_id, daemon=True,
                args=(worker_id, self.pool, client, self._stop),
                kwargs={"lease_ms": self.lease_ms, "metrics": self.metrics})
            thread.start()
            self._threads.append(thread)

    def stop(self, join: bool = True):
        self._stop.set()
        if join:
            for thread in self._threads:
                thread.join(timeout=2.0)
        for client in self._clients:
            try:
                client.close()
            except Exception:
                pass

    def kill(self):
        """Abrupt halt: threads stop pulling, leases are left dangling."""
        self._stop.set()


class DgtRuntime:
    """A hosted generator tier: a store client used to run evaluations."""

    def __init__(self, tier_id: str, config: Configuration,
                 client_factory: Callable[[], object]):
        self.tier_id = tier_id
        self.config = config
        self.client_factory = client_factory
        self.client = client_factory()

    def stop(self):
        try:
            self.client.close()
        except Exception:
            pass


@dataclass
class LinkRuntime:
    """One switchable transport link between a tier and its store."""

    link_id: str
    client: RemoteStoreClient
    local_caps: Tuple[ProtocolId, ...]
    remote_caps: Tuple[ProtocolId, ...]

    @property
    def current(self) -> ProtocolId:
        return self.client.protocol

    def stats(self) -> LinkStats:
        return LinkStats(link_id=self.link_id, current=self.current,
                         local_caps=self.local_caps, remote_caps=self.remote_caps)


class EvalState(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    CANCELLED = "cancelled"


@dataclass
class EvaluationHandle:
    evaluation_id: str
    geer: Geer
    context: Context
    state: EvalState = EvalState.RUNNING
    result_tree: Optional[dict] = None
    error: Optional[str] = None
    started_at: int = 0
    finished_at: Optional[int] = None
    abort: threading.Event = field(default_factory=threading.Event)
    thread: Optional[threading.Thread] = None
    current_sig: Optional[str] = None

    def to_tree(self) -> dict:
        tree = {"evaluation_id": self.evaluation_id, "state": self.state.value,
                "geer_id": self.geer.geer_id, "started_at": self.started_at}
        if self.finished_at is not None:
            tree["finished_at"] = self.finished_at
        if self.result_tree is not None:
            tree["result"] = self.result_tree
        if self.error is not None:
            tree["error"] = self.error
        return tree


# ---------------------------------------------------------------------------
# The manager


class GridRuntime:
    """Manager tier for one grid instance, hosting tiers in-process."""

    def __init__(self, config: Optional[Configuration] = None,
                 clock: Optional[Callable[[], int]] = None,
                 instance_name: str = "grid"):
        self.config = config or Configuration()
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.secret = self.config.get("instance.secret", DEFAULT_SECRET).encode("utf-8")
        self.engine: PolicyEngine = default_engine(
            clock=self.clock,
            heartbeat_interval_ms=self.config.get_int(
                "heartbeat.interval_ms", autonomic.DEFAULT_HEARTBEAT_INTERVAL_MS),
            miss_k=self.config.get_int("heartbeat.miss_k", autonomic.DEFAULT_MISS_K),
            low_perf_window_ms=self.config.get_int(
                "heartbeat.low_perf_window_ms", autonomic.DEFAULT_LOW_PERF_WINDOW_MS))
        self._lock = threading.RLock()
        self.info = InfoKeeper()
        self.instances: Dict[str, GridInstance] = {}
        self.tier_runtimes: Dict[str, object] = {}
        self.links: Dict[str, LinkRuntime] = {}
        self.heartbeats: Dict[str, int] = {}
        self.evaluations: Dict[str, EvaluationHandle] = {}
        self.procedure_registry: Dict[str, Callable] = marf_plan.default_procedure_pool()
        self._counters = {"instance": 0, "node": 0, "tier": 0, "evaluation": 0}
        self._node_threads: Dict[str, Tuple[threading.Event, threading.Thread]] = {}
        self._completed_window: Dict[str, Tuple[int, int]] = {}  # node -> (count, at)
        self._monitor_stop: Optional[threading.Event] = None
        self._wal_paths: set = set()
        self.instance = self.create_instance(instance_name)

    # -- small helpers -------------------------------------------------------

    def _next_id(self, prefix: str) -> str:
        while True:
            self._counters[prefix] += 1
            candidate = "%s-%d" % (prefix, self._counters[prefix])
            if prefix == "node" and self.info.node(candidate) is not None:
                continue
            return candidate

    def _next_tier_id(self, kind: TierKind) -> str:
        while True:
            self._counters["tier"] += 1
            candidate = "%s-%d" % (kind.value.lower(), self._counters["tier"])
            if self.info.tier(candidate) is None:
                return candidate

    def emit(self, name: str, subject: str, **attributes):
        try:
            self.engine.emit(name, subject, **attributes)
        except autonomic.UnknownEvent:
            log.warning("dropping unregistered event %r", name)

    def register_procedure(self, name: str, fn: Callable):
        with self._lock:
            self.procedure_registry[name] = fn

    def known_procedures(self) -> set:
        with self._lock:
            names = set()
            for runtime in self.tier_runtimes.values():
                if isinstance(runtime, DwtRuntime):
                    names |= set(runtime.pool)
            return names

    # -- instances and nodes ---------------------------------------------------

    def create_instance(self, instance_name: str) -> GridInstance:
        with self._lock:
            instance = GridInstance(self._next_id("instance"), instance_name)
            self.instances[instance.instance_id] = instance
            return instance

    def register_node(self, node_name: str, address: str, color: str,
                      instance_id: Optional[str] = None,
                      node_id: Optional[str] = None) -> NodeRegistration:
        with self._lock:
            instance_id = instance_id or self.instance.instance_id
            if instance_id not in self.instances:
                raise UnknownInstance(instance_id)
            if not tiers._ADDRESS_RE.match(address):
                raise tiers.BadAddress("address must be host:port, got %r" % address)
            if node_id is not None and self.info.node(node_id) is not None:
                existing = self.info.node(node_id)
                if (existing.node_name, existing.address) != (node_name, address):
                    raise ValueError("node id %s is already taken" % node_id)
            registration = NodeRegistration(
                node_id=node_id or self._next_id("node"), node_name=node_name,
                address=address, color=color, registered_at=self.clock())
            updated = self.info.save_node_registration(registration)
        self.emit("nodeRegistered", registration.node_id, node_name=node_name,
                  updated=int(updated))
        return registration

    def node_lifecycle(self, node_id: str, action: str) -> NodeRegistration:
        with self._lock:
            node = self.info.node(node_id)
            if node is None:
                raise UnknownNode(node_id)
            if action == "Start":
                if node.status in (NodeStatus.STARTED,):
                    return node
                if node.status == NodeStatus.DEAD:
                    raise IllegalTransition("cannot start a dead node")
                node.status = NodeStatus.STARTED
                self.heartbeats[node_id] = self.clock()
                self._start_heartbeat(node_id)
                for tier in self.info.tiers_on(node_id):
                    runtime = self.tier_runtimes.get(tier.tier_id)
                    if isinstance(runtime, DwtRuntime):
                        runtime.start()
            elif action == "Stop":
                if node.status is not NodeStatus.STARTED:
                    raise IllegalTransition("can only stop a started node")
                node.status = NodeStatus.STOPPED
                self._halt_heartbeat(node_id)
                for tier in self.info.tiers_on(node_id):
                    runtime = self.tier_runtimes.get(tier.tier_id)
                    if isinstance(runtime, DwtRuntime):
                        runtime.stop()
                        self._release_worker_leases(tier, runtime)
            else:
                raise IllegalTransition("unknown lifecycle action %r" % action)
        self.emit("nodeStarted" if action == "Start" else "nodeStopped", node_id)
        with self._lock:
            return self.info.node(node_id)

    def kill_node(self, node_id: str):
        """Fault injection: the node's host dies. Threads halt abruptly,
        leases dangle, and the manager only learns through missed heartbeats."""
        with self._lock:
            node = self.info.node(node_id)
            if node is None:
                raise UnknownNode(node_id)
            self._halt_heartbeat(node_id)
            for tier in self.info.tiers_on(node_id):
                runtime = self.tier_runtimes.get(tier.tier_id)
                if isinstance(runtime, DwtRuntime):
                    runtime.kill()
        self.emit("nodeKilled", node_id, injected=1)

    def _start_heartbeat(self, node_id: str):
        self._halt_heartbeat(node_id)  # never leave a stale beater running
        interval = self.engine.heartbeat_interval_ms / 1000.0
        stop = threading.Event()

        def beat():
            while not stop.wait(interval):
                self.heartbeats[node_id] = self.clock()

        thread = threading.Thread(target=beat, name="%s-heartbeat" % node_id, daemon=True)
        thread.start()
        self._node_threads[node_id] = (stop, thread)

    def _halt_heartbeat(self, node_id: str):
        entry = self._node_threads.pop(node_id, None)
        if entry is not None:
            entry[0].set()

    # -- tier allocation ---------------------------------------------------------

    def allocate_tier(self, node_id: str, kind: TierKind,
                      config: Optional[Configuration] = None,
                      tier_id: Optional[str] = None,
                      bind_to: Optional[str] = None) -> TierRegistration:
        with self._lock:
            node = self.info.node(node_id)
            if node is None:
                raise UnknownNode(node_id)
            if node.status is not NodeStatus.STARTED:
                raise NodeNotStarted("node %s is %s" % (node_id, node.status.value))
            # the caller's configuration is cloned: later caller-side mutation
            # must not leak into the running tier
            tier_config = self.config.clone() if config is None else (
                self.config.merged(config))
            kind = TierKind(kind)
            if tier_id is not None and self.info.tier(tier_id) is not None:
                raise ValueError("tier id %s is already taken" % tier_id)
            registration = TierRegistration(
                tier_id=tier_id or self._next_tier_id(kind), kind=kind, node_id=node_id,
                instance_count=tier_config.get_int("tier.instances", 1),
                config=tier_config)
            if kind is TierKind.DST:
                self._allocate_dst(registration)
            elif kind in (TierKind.DGT, TierKind.DWT):
                self._allocate_bound_tier(registration, bind_to=bind_to)
            self.info.save_tier_registration(registration)
        self.emit("tierAllocated", registration.tier_id, kind=kind.value, node=node_id)
        return registration

    def _allocate_dst(self, registration: TierRegistration):
        config = registration.config
        wal_path = config.get("dst.wal.path")
        if wal_path:
            if "{tier}" in wal_path:
                wal_path = wal_path.replace("{tier}", registration.tier_id)
            elif wal_path in self._wal_paths:
                wal_path = "%s.%s" % (wal_path, registration.tier_id)
            self._wal_paths.add(wal_path)
            config = config.clone()
            config.set("dst.wal.path", wal_path)
        runtime = DstRuntime(
            registration.tier_id, config, self.secret,
            security_monitor=lambda code, peer: self._security_monitor(code, peer),
            deposit_observer=lambda sig, proto: self._deposit_observer(sig, proto))
        runtime.wal_path = wal_path or None
        self.tier_runtimes[registration.tier_id] = runtime
        self.info.node_system_relation[registration.node_id] = registration.tier_id

    def _stop_tier_runtime(self, runtime):
        if isinstance(runtime, DstRuntime) and getattr(runtime, "wal_path", None):
            # free the journal path so a replacement tier recovers from it
            self._wal_paths.discard(runtime.wal_path)
        runtime.stop()

    def _allocate_bound_tier(self, registration: TierRegistration,
                             bind_to: Optional[str] = None):
        if bind_to is not None:
            target = self.info.tier(bind_to)
            if target is None or target.kind is not TierKind.DST:
                raise NoDstAvailable("requested store tier %r does not exist" % bind_to)
            dst_id = bind_to
        else:
            dst_id = self.info.least_loaded_dst()
        if dst_id is None:
            raise NoDstAvailable("no store tier exists in this instance")
        self.info.dgt_dwt_registration[registration.tier_id] = dst_id
        factory = self._client_factory(registration, dst_id)
        if registration.kind is TierKind.DWT:
            pool = self._resolve_pool(registration.config)
            lease_ms = registration.config.get_int("dwt.lease_ms", DEFAULT_LEASE_MS)
            runtime = DwtRuntime(registration.tier_id, registration.config, pool,
                                 factory, lease_ms)
            runtime.start()
        else:
            runtime = DgtRuntime(registration.tier_id, registration.config, factory)
        self.tier_runtimes[registration.tier_id] = runtime

    def _resolve_pool(self, config: Configuration) -> dict:
        wanted = config.get("dwt.pool")
        if not wanted:
            return dict(self.procedure_registry)
        pool = {}
        for name in (part.strip() for part in wanted.split(",")):
            if name:
                if name not in self.procedure_registry:
                    raise KeyError("procedure %r is not registered" % name)
                pool[name] = self.procedure_registry[name]
        if not pool:
            raise ValueError("dwt.pool selected no procedures")
        return pool

    def _client_factory(self, registration: TierRegistration, dst_id: str):
        dst_runtime = self.tier_runtimes[dst_id]
        link_mode = registration.config.get("link", "local")
        if link_mode == "local":
            return lambda: LocalStoreClient(dst_runtime.store)
        if link_mode != "tcp":
            raise ValueError("unknown link mode %r" % link_mode)
        if dst_runtime.address is None:
            raise ValueError("tier %s wants a tcp link but %s serves none"
                             % (registration.tier_id, dst_id))
        host, port = dst_runtime.address
        caps_raw = registration.config.get("link.caps", "TcpText,TcpBinary")
        caps = tuple(ProtocolId(c.strip()) for c in caps_raw.split(","))
        forced = registration.config.get("link.protocol")

        def factory():
            client = connect_store(host, port, self.secret, caps=caps)
            if forced:
                client.set_protocol(ProtocolId(forced))
            link_id = "%s->%s" % (registration.tier_id, dst_id)
            self.links[link_id] = LinkRuntime(
                link_id=link_id, client=client, local_caps=caps,
                remote_caps=tuple(dst_runtime.server.handler.caps))
            return client

        return factory

    def deallocate_tier(self, tier_id: str) -> bool:
        with self._lock:
            registration = self.info.tier(tier_id)
            if registration is None:
                return False
            runtime = self.tier_runtimes.pop(tier_id, None)
            if runtime is not None:
                self._stop_tier_runtime(runtime)
            self.links = {lid: link for lid, link in self.links.items()
                          if not lid.startswith("%s->" % tier_id)
                          and not lid.endswith("->%s" % tier_id)}
            self.info.remove_tier(tier_id)
            rebound = []
            if registration.kind is TierKind.DST:
                replacement = self.info.least_loaded_dst()
                if replacement is not None:
                    for bound_id, dst_id in list(self.info.dgt_dwt_registration.items()):
                        if dst_id is None:
                            self._rebind(bound_id, replacement)
                            rebound.append(bound_id)
        self.emit("tierDeallocated", tier_id, kind=registration.kind.value)
        for bound_id in rebound:
            self.emit("tierReallocated", bound_id, to=self.info.dgt_dwt_registration[bound_id])
        return True

    def _rebind(self, tier_id: str, dst_id: str):
        registration = self.info.tier(tier_id)
        runtime = self.tier_runtimes.get(tier_id)
        self.info.dgt_dwt_registration[tier_id] = dst_id
        factory = self._client_factory(registration, dst_id)
        if isinstance(runtime, DwtRuntime):
            runtime.stop(join=False)
            runtime.client_factory = factory
            runtime.start()
        elif isinstance(runtime, DgtRuntime):
            runtime.stop()
            runtime.client_factory = factory
            runtime.client = factory()

    def _release_worker_leases(self, registration: TierRegistration, runtime: DwtRuntime):
        dst_id = self.info.dgt_dwt_registration.get(registration.tier_id)
        dst_runtime = self.tier_runtimes.get(dst_id) if dst_id else None
        if isinstance(dst_runtime, DstRuntime):
            dst_runtime.store.release_worker_leases(runtime.worker_ids)

    # -- healing -------------------------------------------------------------

    def replace_node(self, failed_node_id: str) -> ReplacementPlan:
        with self._lock:
            failed = self.info.node(failed_node_id)
            if failed is None:
                raise UnknownNode(failed_node_id)
            doomed = self.info.tiers_on(failed_node_id)
            failed.status = NodeStatus.DEAD
            self._halt_heartbeat(failed_node_id)
            if not doomed:
                self.emit("nodeReplaced", failed_node_id, migrated=0)
                return ReplacementPlan(failed_node_id, ())
            candidates = [n for n in self.info.node_registrations
                          if n.node_id != failed_node_id and n.status is NodeStatus.STARTED]
            if not candidates:
                self.emit("nodeReplacementFailed", failed_node_id)
                raise NoReplacementNode("no live node can absorb %s" % failed_node_id)
            migrated = []
            for tier in doomed:
                runtime = self.tier_runtimes.pop(tier.tier_id, None)
                if isinstance(runtime, DwtRuntime):
                    runtime.kill()
                    self._release_worker_leases(tier, runtime)
                elif runtime is not None:
                    self._stop_tier_runtime(runtime)
                self.info.remove_tier(tier.tier_id)
                target = min(candidates,
                             key=lambda n: (len(self.info.tiers_on(n.node_id)), n.node_id))
                replacement = self.allocate_tier(target.node_id, tier.kind,
                                                 config=tier.config)
                migrated.append((tier.tier_id, replacement.tier_id, target.node_id))
        for old_id, new_id, target in migrated:
            self.emit("tierReallocated", new_id, previous=old_id, node=target)
        self.emit("nodeReplaced", failed_node_id, migrated=len(migrated))
        return ReplacementPlan(failed_node_id, tuple(migrated))

    def recover_node(self, node_id: str) -> RecoveryPlan:
        with self._lock:
            node = self.info.node(node_id)
            if node is None:
                raise UnknownNode(node_id)
            healthy = (node.status is NodeStatus.STARTED
                       and not self.engine.fluent_active("inLowPerformance", node_id))
            if healthy:
                return RecoveryPlan(node_id, ())
            restarted = []
            self.emit("recoveryStarted", node_id)
            try:
                for tier in self.info.tiers_on(node_id):
                    runtime = self.tier_runtimes.get(tier.tier_id)
                    if isinstance(runtime, DwtRuntime):
                        runtime.stop(join=False)
                        self._release_worker_leases(tier, runtime)
                        runtime.config = tier.config.clone()
                        runtime.start()
                        restarted.append(tier.tier_id)
            except Exception as exc:
                node.status = NodeStatus.SUSPECTED
                self.emit("recoveryFailed", node_id, reason=str(exc))
                raise RecoveryFailed(str(exc)) from exc
            node.status = NodeStatus.STARTED
            self.heartbeats[node_id] = self.clock()
        self.emit("recoverySucceeded", node_id, restarted=len(restarted))
        self.emit("performanceNormalized", node_id)
        return RecoveryPlan(node_id, tuple(restarted))

    # -- monitoring ---------------------------------------------------------------

    def node_health(self, now: Optional[int] = None) -> List[NodeHealth]:
        if now is None:
            now = self.clock()
        window_ms = self.engine.low_perf_window_ms
        with self._lock:
            healths = []
            for node in self.info.node_registrations:
                executed = 0
                pending = 0
                for tier in self.info.tiers_on(node.node_id):
                    runtime = self.tier_runtimes.get(tier.tier_id)
                    if isinstance(runtime, DwtRuntime):
                        executed += runtime.metrics.snapshot()["executions"]
                        dst_id = self.info.dgt_dwt_registration.get(tier.tier_id)
                        dst = self.tier_runtimes.get(dst_id) if dst_id else None
                        if isinstance(dst, DstRuntime):
                            snap = dst.store.state_snapshot()
                            pending += len(snap["pending"]) + len(snap["in_flight"])
                previous_count, previous_at = self._completed_window.get(
                    node.node_id, (executed, now))
                if now - previous_at >= window_ms:
                    self._completed_window[node.node_id] = (executed, now)
                completed_in_window = executed - previous_count
                healths.append(NodeHealth(
                    node_id=node.node_id,
                    started=node.status is NodeStatus.STARTED,
                    last_heartbeat_ms=self.heartbeats.get(node.node_id, 0),
                    completed_in_window=completed_in_window,
                    pending_demands=pending,
                    window_ms=now - previous_at if now > previous_at else 0))
        return healths

    def monitor_tick(self, now: Optional[int] = None) -> List[autonomic.ActionInvocation]:
        """One observe/decide/act cycle; called by the monitor thread."""
        self.engine.heartbeat_monitor(self.node_health(now), now)
        invocations = self.engine.step_policies()
        for invocation in invocations:
            self._execute_action(invocation)
        return invocations

    def _execute_action(self, invocation: autonomic.ActionInvocation):
        try:
            if invocation.action == "replaceFailedNode":
                self.replace_node(invocation.subject)
            elif invocation.action == "startSelfHealing":
                try:
                    self.recover_node(invocation.subject)
                except RecoveryFailed:
                    self.replace_node(invocation.subject)
            elif invocation.action == "runGlobalOptimization":
                self._run_link_optimization()
            # checkPublicMessage acts per frame in the transport hook
        except (NoReplacementNode, UnknownNode) as exc:
            log.warning("action %s(%s) not applicable: %s",
                        invocation.action, invocation.subject, exc)

    def start_monitor(self):
        if self._monitor_stop is not None:
            return
        stop = threading.Event()
        interval = self.engine.heartbeat_interval_ms / 2000.0

        def run():
            while not stop.wait(interval):
                try:
                    self.monitor_tick()
                except Exception:
                    log.exception("monitor tick failed")

        self._monitor_stop = stop
        threading.Thread(target=run, name="gmt-monitor", daemon=True).start()

    # -- security and optimization hooks ---------------------------------------

    def _security_monitor(self, code: str, peer: str):
        self.engine.check_message_security(code, peer)

    def _deposit_observer(self, sig: str, protocol: ProtocolId):
        pass  # tests replace this to watch which encoding deposits used

    def _run_link_optimization(self, subject: str = "pipeline"):
        switch = optimize_on_classification(
            self.engine, "classification",
            [link.stats() for link in self.links.values()], subject=subject)
        if switch is None:
            return None
        for link_id, previous, selected in switch.changes:
            link = self.links.get(link_id)
            if link is not None:
                link.client.set_protocol(selected)
                self.emit("protocolSwitched", link_id,
                          previous=previous.value, selected=selected.value)
        return switch

    def _on_stage(self, stage_name: str, demand: Demand, subject: str):
        if stage_name == marf_plan.CLASSIFICATION_STAGE:
            self._run_link_optimization(subject=subject)

    # -- evaluations --------------------------------------------------------------

    def _pick_dgt(self) -> DgtRuntime:
        with self._lock:
            for tier in self.info.tier_registrations:
                if tier.kind is TierKind.DGT:
                    runtime = self.tier_runtimes.get(tier.tier_id)
                    if runtime is not None:
                        return runtime
        raise UnknownTier("no generator tier is allocated")

    def start_evaluation(self, geer: Geer, context: Context,
                         timeout: Optional[float] = None) -> EvaluationHandle:
        dgt = self._pick_dgt()
        with self._lock:
            handle = EvaluationHandle(
                evaluation_id=self._next_id("evaluation"), geer=geer, context=context,
                started_at=self.clock())
            self.evaluations[handle.evaluation_id] = handle
        timeout = timeout or self.config.get_float("dgt.eval_timeout_s", 60.0)
        self.emit("evaluationStarted", handle.evaluation_id, geer=geer.geer_id)

        def run():
            try:
                result = self.run_evaluation(geer, context, dgt=dgt, timeout=timeout,
                                             handle=handle)
                handle.result_tree = result.value.to_tree()
                handle.state = EvalState.COMPLETED
                self.emit("evaluationCompleted", handle.evaluation_id)
            except Exception as exc:
                handle.error = str(exc)
                handle.state = (EvalState.CANCELLED if handle.abort.is_set()
                                else EvalState.FAILED)
                self.emit("evaluationFailed", handle.evaluation_id, reason=str(exc))
            finally:
                handle.finished_at = self.clock()

        handle.thread = threading.Thread(target=run, name=handle.evaluation_id, daemon=True)
        handle.thread.start()
        return handle

    def run_evaluation(self, geer: Geer, context: Context,
                       dgt: Optional[DgtRuntime] = None,
                       timeout: float = 60.0,
                       handle: Optional[EvaluationHandle] = None):
        """Synchronous evaluation on a generator tier."""
        dgt = dgt or self._pick_dgt()
        subject = handle.evaluation_id if handle else dgt.tier_id

        def stage_hook(stage_name: str, demand: Demand):
            if handle is not None:
                handle.current_sig = canonical_signature(demand).digest
                if handle.abort.is_set():
                    raise EvaluationTimeout("evaluation cancelled")
            self._on_stage(stage_name, demand, subject)

        return dgt_evaluate(geer, context, dgt.client, timeout=timeout,
                            known_procedures=self.known_procedures() or None,
                            stage_hook=stage_hook, generator_id=subject)

    def cancel_evaluation(self, evaluation_id: str) -> EvaluationHandle:
        with self._lock:
            handle = self.evaluations.get(evaluation_id)
            if handle is None:
                raise UnknownEvaluation(evaluation_id)
        handle.abort.set()
        if handle.current_sig is not None:
            for tier in self.info.tier_registrations:
                runtime = self.tier_runtimes.get(tier.tier_id)
                if isinstance(runtime, DstRuntime):
                    runtime.store.cancel(SignatureKey(handle.current_sig))
        return handle

    # -- snapshot -------------------------------------------------------------------

    def gmt_snapshot(self) -> dict:
        with self._lock:
            nodes = [node.to_tree() for node in self.info.node_registrations]
            tier_trees = []
            for tier in self.info.tier_registrations:
                tree = tier.to_tree()
                runtime = self.tier_runtimes.get(tier.tier_id)
                if isinstance(runtime, DstRuntime):
                    tree["metrics"] = runtime.metrics()
                    if runtime.address:
                        tree["address"] = "%s:%d" % runtime.address
                elif isinstance(runtime, DwtRuntime):
                    tree["metrics"] = runtime.metrics.snapshot()
                tier_trees.append(tree)
            snapshot = {
                "instance": {"instance_id": self.instance.instance_id,
                             "instance_name": self.instance.instance_name},
                "nodes": nodes,
                "tiers": tier_trees,
                "relations": {
                    "node_system": dict(self.info.node_system_relation),
                    "tier_bindings": {k: v for k, v in
                                      self.info.dgt_dwt_registration.items()
                                      if v is not None},
                },
                "links": {link_id: link.current.value
                          for link_id, link in self.links.items()},
                "metrics": {name: metric.value
                            for name, metric in self.engine.metrics.items()},
                "evaluations": [handle.to_tree() for handle in self.evaluations.values()],
            }
        return snapshot

    def audit(self):
        with self._lock:
            self.info.audit()

    def shutdown(self):
        if self._monitor_stop is not None:
            self._monitor_stop.set()
            self._monitor_stop = None
        with self._lock:
            for node_id in list(self._node_threads):
                self._halt_heartbeat(node_id)
            for runtime in self.tier_runtimes.values():
                try:
                    self._stop_tier_runtime(runtime)
                except Exception:
                    pass
            self.tier_runtimes.clear()
