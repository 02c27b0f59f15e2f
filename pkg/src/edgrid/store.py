"""The demand store: result warehouse, FIFO pending queue, leases, WAL.

The store is the middleware every tier talks through. It is a single
logical state machine: every mutating operation takes one lock, appends a
transaction record to the write-ahead log *before* touching state, and
wakes any generators blocked on a result. A signature lives in at most one
of {pending, in_flight, warehouse} at any observable point, warehouse
entries are never overwritten, and nothing is ever evicted.

Recovery replays the log into a fresh store; leases found in the log are
treated as expired, so interrupted demands return to the pending queue in
their original deposit order.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, List, Optional, Set, Tuple

from . import canon
from .canon import MalformedEncoding
from .model import (
    Demand,
    DemandResult,
    SignatureKey,
    canonical_signature,
    decode_demand,
    decode_result,
    encode_demand,
    encode_result,
)

log = logging.getLogger(__name__)

DEFAULT_LEASE_MS = 30_000


class StoreUnavailable(RuntimeError):
    """The WAL could not be written; the operation was not acknowledged."""


class SignatureMismatch(ValueError):
    """deposit_result called with a result whose signature differs."""


class InvalidRecord(ValueError):
    """A transaction record violates the log's schema or monotonicity."""


class CorruptLog(RuntimeError):
    """A record in the middle of the log failed to parse."""


class TxOp(str, Enum):
    DEPOSIT_DEMAND = "DEPOSIT_DEMAND"
    GRANT_LEASE = "GRANT_LEASE"
    DEPOSIT_RESULT = "DEPOSIT_RESULT"
    CANCEL = "CANCEL"
    EXPIRE = "EXPIRE"


@dataclass(frozen=True)
class Lease:
    worker_id: str
    granted_at: int
    expires_at: int

    def __post_init__(self):
        if self.expires_at <= self.granted_at:
            raise ValueError("expires_at must be after granted_at")


@dataclass(frozen=True)
class TransactionRecord:
    """One WAL line: strictly increasing txn_id, op, and its payload bytes."""

    txn_id: int
    object_name: str
    op: TxOp
    value: bytes
    timestamp: int

    def to_tree(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "object_name": self.object_name,
            "op": self.op.value,
            "value": self.value.hex(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_tree(cls, tree) -> "TransactionRecord":
        if not isinstance(tree, dict) or set(tree) != {
            "txn_id", "object_name", "op", "value", "timestamp"}:
            raise InvalidRecord("malformed transaction record fields")
        if not isinstance(tree["txn_id"], int) or not isinstance(tree["timestamp"], int):
            raise InvalidRecord("txn_id and timestamp must be integers")
        if not isinstance(tree["object_name"], str) or not isinstance(tree["value"], str):
            raise InvalidRecord("object_name and value must be strings")
        try:
            op = TxOp(tree["op"])
        except ValueError:
            raise InvalidRecord("unknown op: %r" % tree["op"]) from None
        try:
            value = bytes.fromhex(tree["value"])
        except ValueError:
            raise InvalidRecord("value is not valid hex") from None
        return cls(txn_id=tree["txn_id"], object_name=tree["object_name"], op=op,
                   value=value, timestamp=tree["timestamp"])


class WriteAheadLog:
    """Append-only, one canonical-text record per line, flushed per append."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self._last_txn_id = -1
        self._offset = 0
        try:
            self._fh = open(path, "ab")
        except OSError as exc:
            raise StoreUnavailable("cannot open WAL %s: %s" % (path, exc)) from exc

    def append(self, record: TransactionRecord) -> int:
        if record.txn_id <= self._last_txn_id:
            raise InvalidRecord(
                "txn_id %d is not greater than %d" % (record.txn_id, self._last_txn_id))
        line = canon.text_encode(record.to_tree()) + b"\n"
        try:
            self._fh.write(line)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except (OSError, ValueError) as exc:
            raise StoreUnavailable("WAL append failed: %s" % exc) from exc
        self._last_txn_id = record.txn_id
        offset = self._offset
        self._offset += 1
        return offset

    def resume_after(self, last_txn_id: int, record_count: int):
        """Continue an existing log: replayed state owns ids up to last_txn_id."""
        self._last_txn_id = max(self._last_txn_id, last_txn_id)
        self._offset = max(self._offset, record_count)

    def close(self):
        try:
            self._fh.close()
        except OSError:
            pass


def read_records(path: str) -> Tuple[List[TransactionRecord], int]:
    """All complete records in the log, plus how many raw lines were read.

    A truncated or unparseable *final* line is dropped with a warning, per
    the crash model (the process died mid-append). Anything wrong earlier
    in the file is real corruption and raises CorruptLog.
    """
    records: List[TransactionRecord] = []
    bad_tail = False
    with open(path, "rb") as fh:
        lines = fh.read().split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    else:
        bad_tail = bool(lines)  # file did not end in a newline: torn final write
    for index, line in enumerate(lines):
        is_last = index == len(lines) - 1
        try:
            record = TransactionRecord.from_tree(canon.text_decode(line))
            if records and record.txn_id <= records[-1].txn_id:
                raise InvalidRecord("txn_id not increasing")
        except (MalformedEncoding, InvalidRecord, KeyError) as exc:
            if is_last:
                log.warning("dropping truncated WAL tail record in %s: %s", path, exc)
                return records, index
            raise CorruptLog("corrupt record %d in %s: %s" % (index, path, exc)) from exc
        if is_last and bad_tail:
            # a parseable line without its newline is still a torn write
            log.warning("dropping WAL tail without newline in %s", path)
            return records, index
        records.append(record)
    return records, len(lines)


class DepositStatus(str, Enum):
    ENQUEUED = "Enqueued"
    ALREADY_PENDING = "AlreadyPending"
    CACHED = "Cached"


@dataclass(frozen=True)
class DepositOutcome:
    status: DepositStatus
    result: Optional[DemandResult] = None


class ResultAck(str, Enum):
    STORED = "Stored"
    DUPLICATE_IGNORED = "DuplicateIgnored"


class DemandStore:
    """Serialized warehouse + pending queue + lease table, optionally WAL-backed.

    With ``wal=None`` the store is purely in-memory; the recovery tests use
    that form as their oracle.
    """

    def __init__(self, wal: Optional[WriteAheadLog] = None,
                 clock: Optional[Callable[[], int]] = None):
        self._wal = wal
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._warehouse: "OrderedDict[str, DemandResult]" = OrderedDict()
        self._pending: "OrderedDict[str, Demand]" = OrderedDict()
        self._in_flight: dict = {}  # sig -> (Demand, Lease, grant_seq)
        self._cancelled: Set[str] = set()
        self._deposit_seq: dict = {}  # sig -> arrival order, survives requeue
        self._waiters: dict = {}  # sig -> set of requester ids
        self._next_txn = 0
        self._next_seq = 0
        self._next_grant = 0
        self.counters = {"deposits": 0, "withdrawals": 0, "results": 0,
                         "cache_hits": 0, "expired": 0, "cancelled": 0}

    # -- logging helpers ---------------------------------------------------

    def _log(self, op: TxOp, sig: str, value: bytes):
        if self._wal is None:
            self._next_txn += 1
            return
        record = TransactionRecord(txn_id=self._next_txn, object_name=sig, op=op,
                                   value=value, timestamp=self._clock())
        self._wal.append(record)
        self._next_txn += 1

    def wal_append(self, record: TransactionRecord) -> int:
        """Append a caller-built record; offsets are strictly increasing."""
        if self._wal is None:
            raise StoreUnavailable("store has no write-ahead log attached")
        with self._lock:
            offset = self._wal.append(record)
            self._next_txn = record.txn_id + 1
            return offset

    # -- core operations ---------------------------------------------------

    def deposit_demand(self, demand: Demand) -> DepositOutcome:
        sig = canonical_signature(demand).digest
        with self._lock:
            if sig in self._warehouse:
                self.counters["cache_hits"] += 1
                return DepositOutcome(DepositStatus.CACHED, self._warehouse[sig])
            if sig in self._pending:
                return DepositOutcome(DepositStatus.ALREADY_PENDING)
            if sig in self._in_flight:
                # someone wants it again: a pending cancel mark no longer applies
                self._cancelled.discard(sig)
                return DepositOutcome(DepositStatus.ALREADY_PENDING)
            self._log(TxOp.DEPOSIT_DEMAND, sig, encode_demand(demand))
            self._pending[sig] = demand
            self._deposit_seq[sig] = self._next_seq
            self._next_seq += 1
            self._cancelled.discard(sig)
            self.counters["deposits"] += 1
            return DepositOutcome(DepositStatus.ENQUEUED)

    def withdraw_pending(self, worker_id: str, now: Optional[int] = None,
                         lease_ms: int = DEFAULT_LEASE_MS) -> Optional[Demand]:
        if not worker_id:
            raise ValueError("worker_id must be non-empty")
        with self._lock:
            if not self._pending:
                return None
            if now is None:
                now = self._clock()
            sig, demand = next(iter(self._pending.items()))
            lease = Lease(worker_id=worker_id, granted_at=now, expires_at=now + lease_ms)
            self._log(TxOp.GRANT_LEASE, sig, canon.text_encode({
                "worker_id": worker_id, "granted_at": lease.granted_at,
                "expires_at": lease.expires_at}))
            del self._pending[sig]
            self._in_flight[sig] = (demand, lease, self._next_grant)
            self._next_grant += 1
            self.counters["withdrawals"] += 1
            return demand

    def deposit_result(self, sig: SignatureKey, result: DemandResult) -> ResultAck:
        if result.signature != sig:
            raise SignatureMismatch(
                "result signed %s deposited under %s" % (result.signature, sig))
        digest = sig.digest
        with self._lock:
            if digest in self._warehouse:
                return ResultAck.DUPLICATE_IGNORED
            if digest in self._cancelled:
                # cancelled while in flight: drop, warehouse stays empty
                self._in_flight.pop(digest, None)
                self._cancelled.discard(digest)
                self._changed.notify_all()
                return ResultAck.DUPLICATE_IGNORED
            self._log(TxOp.DEPOSIT_RESULT, digest, encode_result(result))
            self._in_flight.pop(digest, None)
            self._pending.pop(digest, None)
            self._warehouse[digest] = result
            self.counters["results"] += 1
            self._changed.notify_all()
            return ResultAck.STORED

    def lookup(self, sig: SignatureKey) -> Optional[DemandResult]:
        with self._lock:
            return self._warehouse.get(sig.digest)

    def cancel(self, sig: SignatureKey) -> bool:
        digest = sig.digest
        with self._lock:
            if digest in self._warehouse:
                return False
            if digest in self._pending:
                self._log(TxOp.CANCEL, digest, b"")
                del self._pending[digest]
                self._deposit_seq.pop(digest, None)
                self.counters["cancelled"] += 1
                self._changed.notify_all()
                return True
            if digest in self._in_flight:
                self._log(TxOp.CANCEL, digest, b"")
                self._cancelled.add(digest)
                self.counters["cancelled"] += 1
                self._changed.notify_all()
                return True
            return False

    def expire_leases(self, now: Optional[int] = None) -> List[SignatureKey]:
        with self._lock:
            if now is None:
                now = self._clock()
            expired = [(grant_seq, sig) for sig, (_, lease, grant_seq)
                       in self._in_flight.items() if lease.expires_at <= now]
            expired.sort()
            return self._requeue_head([sig for _, sig in expired])

    def release(self, sig: SignatureKey, worker_id: str) -> bool:
        """Voluntarily return a leased demand to the pending head.

        Used by workers that withdrew a demand whose procedure is outside
        their pool, and by node replacement reclaiming a dead node's leases.
        """
        with self._lock:
            entry = self._in_flight.get(sig.digest)
            if entry is None or entry[1].worker_id != worker_id:
                return False
            return bool(self._requeue_head([sig.digest]))

    def release_worker_leases(self, worker_ids: Iterable[str]) -> List[SignatureKey]:
        """Reclaim every lease held by the given workers (e.g. a dead node's)."""
        wanted = set(worker_ids)
        with self._lock:
            held = [(grant_seq, sig) for sig, (_, lease, grant_seq)
                    in self._in_flight.items() if lease.worker_id in wanted]
            held.sort()
            return self._requeue_head([sig for _, sig in held])

    def _requeue_head(self, sigs: List[str]) -> List[SignatureKey]:
        # earliest-granted must come out first, so push to the head in
        # reverse; the WAL sees the same order replay will re-apply
        requeued = []
        dropped = 0
        for sig in reversed(sigs):
            self._log(TxOp.EXPIRE, sig, b"")
            demand, _, _ = self._in_flight.pop(sig)
            if sig in self._cancelled:
                self._cancelled.discard(sig)
                self._deposit_seq.pop(sig, None)
                dropped += 1
                continue
            self._pending[sig] = demand
            self._pending.move_to_end(sig, last=False)
            requeued.append(sig)
        self.counters["expired"] += len(requeued)
        if requeued or dropped:
            self._changed.notify_all()
        return [SignatureKey(sig) for sig in reversed(requeued)]

    # -- blocking reads ----------------------------------------------------

    def wait_for_result(self, sig: SignatureKey, timeout: float,
                        requester_id: str = "?") -> Optional[DemandResult]:
        """Block until a result for *sig* lands in the warehouse, or time out.

        Returns early (None) once the signature is orphaned: not pending,
        not leased, not cancelled-in-flight and not stored, so nothing can
        ever produce it (e.g. it was cancelled while the caller waited).
        """
        digest = sig.digest
        deadline = time.monotonic() + timeout
        with self._lock:
            self._waiters.setdefault(digest, set()).add(requester_id)
            try:
                while True:
                    result = self._warehouse.get(digest)
                    if result is not None:
                        return result
                    if self.is_orphaned(digest):
                        return None
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._changed.wait(remaining)
            finally:
                waiting = self._waiters.get(digest)
                if waiting is not None:
                    waiting.discard(requester_id)
                    if not waiting:
                        del self._waiters[digest]

    def is_orphaned(self, digest: str) -> bool:
        with self._lock:
            return (digest not in self._warehouse and digest not in self._pending
                    and digest not in self._in_flight)

    # -- introspection -----------------------------------------------------

    def state_snapshot(self) -> dict:
        """Consistent point-in-time view, for auditors and the manager."""
        with self._lock:
            return {
                "warehouse": dict(self._warehouse),
                "pending": list(self._pending.keys()),
                "pending_demands": list(self._pending.values()),
                "in_flight": {sig: lease for sig, (_, lease, _) in self._in_flight.items()},
                "cancelled": set(self._cancelled),
                "waiters": {sig: set(ids) for sig, ids in self._waiters.items()},
                "counters": dict(self.counters),
            }

    def warehouse_size(self) -> int:
        with self._lock:
            return len(self._warehouse)

    def close(self):
        if self._wal is not None:
            self._wal.close()


# ---------------------------------------------------------------------------
# Recovery


def _apply_record(store: DemandStore, record: TransactionRecord):
    sig = record.object_name
    if record.op is TxOp.DEPOSIT_DEMAND:
        demand = decode_demand(record.value)
        if sig not in store._warehouse and sig not in store._pending \
                and sig not in store._in_flight:
            store._pending[sig] = demand
            store._deposit_seq[sig] = store._next_seq
            store._next_seq += 1
            store._cancelled.discard(sig)
        elif sig in store._in_flight:
            store._cancelled.discard(sig)
    elif record.op is TxOp.GRANT_LEASE:
        tree = canon.text_decode(record.value)
        lease = Lease(worker_id=tree["worker_id"], granted_at=tree["granted_at"],
                      expires_at=tree["expires_at"])
        demand = store._pending.pop(sig, None)
        if demand is not None:
            store._in_flight[sig] = (demand, lease, store._next_grant)
            store._next_grant += 1
    elif record.op is TxOp.DEPOSIT_RESULT:
        result = decode_result(record.value)
        if sig not in store._warehouse and sig not in store._cancelled:
            store._pending.pop(sig, None)
            store._in_flight.pop(sig, None)
            store._warehouse[sig] = result
        elif sig in store._cancelled:
            store._in_flight.pop(sig, None)
            store._cancelled.discard(sig)
    elif record.op is TxOp.CANCEL:
        if sig in store._pending:
            del store._pending[sig]
            store._deposit_seq.pop(sig, None)
        elif sig in store._in_flight:
            store._cancelled.add(sig)
    elif record.op is TxOp.EXPIRE:
        entry = store._in_flight.pop(sig, None)
        if entry is not None:
            if sig in store._cancelled:
                store._cancelled.discard(sig)
                store._deposit_seq.pop(sig, None)
            else:
                store._pending[sig] = entry[0]
                store._pending.move_to_end(sig, last=False)


def _settle_replayed(store: DemandStore):
    """Treat leases still open in the log as expired.

    Their demands return to the front of the pending queue ordered by their
    original deposit; demands already requeued by logged EXPIRE records keep
    the order the log gave them.
    """
    leftovers = []
    for sig, (demand, _, _) in store._in_flight.items():
        if sig not in store._cancelled:
            leftovers.append((store._deposit_seq.get(sig, 0), sig, demand))
    store._in_flight.clear()
    store._cancelled.clear()
    leftovers.sort()
    rebuilt = OrderedDict((sig, demand) for _, sig, demand in leftovers)
    for sig, demand in store._pending.items():
        rebuilt[sig] = demand
    store._pending = rebuilt


def wal_replay(log_path: str, clock: Optional[Callable[[], int]] = None) -> DemandStore:
    """Reconstruct a store from its log (read-only: no WAL is attached)."""
    records, _ = read_records(log_path)
    store = DemandStore(wal=None, clock=clock)
    for record in records:
        _apply_record(store, record)
        store._next_txn = record.txn_id + 1
    _settle_replayed(store)
    return store


def recover(log_path: str, fsync: bool = True,
            clock: Optional[Callable[[], int]] = None) -> DemandStore:
    """Replay the log, then reattach it so the store keeps journaling."""
    if os.path.exists(log_path):
        records, count = read_records(log_path)
    else:
        records, count = [], 0
    if records and count > len(records):
        # drop the torn tail bytes so future appends form valid lines
        _truncate_to(log_path, len(records))
    wal = WriteAheadLog(log_path, fsync=fsync)
    store = DemandStore(wal=wal, clock=clock)
    for record in records:
        _apply_record(store, record)
        store._next_txn = record.txn_id + 1
    _settle_replayed(store)
    wal.resume_after(store._next_txn - 1, len(records))
    return store


def _truncate_to(path: str, keep_records: int):
    with open(path, "rb") as fh:
        data = fh.read()
    end = 0
    for _ in range(keep_records):
        end = data.index(b"\n", end) + 1
    with open(path, "r+b") as fh:
        fh.truncate(end)
