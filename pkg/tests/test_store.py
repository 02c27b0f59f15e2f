"""Demand store: dedupe, FIFO, leases, cancellation, WAL durability."""

import os
import random
import signal
import subprocess
import sys

import pytest

from edgrid import store as store_mod
from edgrid.model import DemandResult, Value, canonical_signature
from edgrid.store import (
    DemandStore,
    DepositStatus,
    InvalidRecord,
    ResultAck,
    TransactionRecord,
    TxOp,
    WriteAheadLog,
)

from workloads import apply_op, drain, make_demand, scripted_ops

HERE = os.path.dirname(os.path.abspath(__file__))


def demand(i=0):
    return make_demand(i)


def result_of(d, value=7, worker="w1"):
    return DemandResult(signature=canonical_signature(d), value=Value.of_int(value),
                        worker_id=worker, computed_at=1234)


def audit_exclusive(store):
    """Each signature lives in at most one of pending / in-flight / warehouse."""
    snap = store.state_snapshot()
    pending = set(snap["pending"])
    in_flight = set(snap["in_flight"])
    warehouse = set(snap["warehouse"])
    assert not pending & in_flight
    assert not pending & warehouse
    assert not in_flight & warehouse
    return snap


class TestDeposit:
    def test_dedupe_law(self):
        st = DemandStore()
        assert st.deposit_demand(demand()).status is DepositStatus.ENQUEUED
        assert st.deposit_demand(demand()).status is DepositStatus.ALREADY_PENDING
        audit_exclusive(st)

    def test_cached_after_completion(self):
        st = DemandStore()
        d = demand()
        st.deposit_demand(d)
        st.withdraw_pending("w1", now=0, lease_ms=100)
        st.deposit_result(canonical_signature(d), result_of(d))
        outcome = st.deposit_demand(d)
        assert outcome.status is DepositStatus.CACHED
        assert outcome.result == result_of(d)
        audit_exclusive(st)

    def test_fifo_order(self):
        st = DemandStore()
        for i in range(3):
            st.deposit_demand(demand(i))
        got = [st.withdraw_pending("w1", now=0, lease_ms=100) for _ in range(3)]
        assert got == [demand(0), demand(1), demand(2)]
        audit_exclusive(st)


class TestWithdraw:
    def test_empty_store(self):
        assert DemandStore().withdraw_pending("w1", now=0, lease_ms=10) is None

    def test_once_delivery_while_leased(self):
        st = DemandStore()
        st.deposit_demand(demand())
        assert st.withdraw_pending("w1", now=0, lease_ms=100) == demand()
        assert st.withdraw_pending("w2", now=50, lease_ms=100) is None
        audit_exclusive(st)

    def test_withdraw_after_expiry(self):
        st = DemandStore()
        st.deposit_demand(demand())
        st.withdraw_pending("w1", now=0, lease_ms=100)
        assert st.withdraw_pending("w2", now=50, lease_ms=100) is None
        expired = st.expire_leases(now=100)
        assert expired == [canonical_signature(demand())]
        assert st.withdraw_pending("w2", now=150, lease_ms=100) == demand()

    def test_empty_worker_id_rejected(self):
        with pytest.raises(ValueError):
            DemandStore().withdraw_pending("", now=0, lease_ms=10)


class TestDepositResult:
    def test_store_and_lookup(self):
        st = DemandStore()
        d = demand()
        st.deposit_demand(d)
        st.withdraw_pending("w1", now=0, lease_ms=100)
        sig = canonical_signature(d)
        assert st.deposit_result(sig, result_of(d)) is ResultAck.STORED
        assert st.lookup(sig) == result_of(d)

    def test_first_write_wins(self):
        st = DemandStore()
        d = demand()
        st.deposit_demand(d)
        st.withdraw_pending("w1", now=0, lease_ms=100)
        sig = canonical_signature(d)
        first = result_of(d, value=1, worker="w1")
        second = result_of(d, value=2, worker="w2")
        assert st.deposit_result(sig, first) is ResultAck.STORED
        assert st.deposit_result(sig, second) is ResultAck.DUPLICATE_IGNORED
        assert st.lookup(sig) == first

    def test_signature_mismatch(self):
        st = DemandStore()
        other_sig = canonical_signature(demand(99))
        with pytest.raises(store_mod.SignatureMismatch):
            st.deposit_result(other_sig, result_of(demand(0)))

    def test_lookup_unknown_is_none_and_pure(self):
        st = DemandStore()
        st.deposit_demand(demand(0))
        st.deposit_demand(demand(1))
        before = st.state_snapshot()["pending"]
        assert st.lookup(canonical_signature(demand(5))) is None
        assert st.state_snapshot()["pending"] == before


class TestCancel:
    def test_cancel_pending(self):
        st = DemandStore()
        st.deposit_demand(demand())
        assert st.cancel(canonical_signature(demand())) is True
        assert st.withdraw_pending("w1", now=0, lease_ms=10) is None

    def test_cancel_unknown(self):
        assert DemandStore().cancel(canonical_signature(demand())) is False

    def test_cancel_in_flight_drops_result(self):
        st = DemandStore()
        d = demand()
        sig = canonical_signature(d)
        st.deposit_demand(d)
        st.withdraw_pending("w1", now=0, lease_ms=100)
        assert st.cancel(sig) is True
        assert st.deposit_result(sig, result_of(d)) is ResultAck.DUPLICATE_IGNORED
        assert st.lookup(sig) is None
        assert st.warehouse_size() == 0
        audit_exclusive(st)

    def test_cancel_completed_is_false(self):
        st = DemandStore()
        d = demand()
        st.deposit_demand(d)
        st.withdraw_pending("w1", now=0, lease_ms=100)
        st.deposit_result(canonical_signature(d), result_of(d))
        assert st.cancel(canonical_signature(d)) is False


class TestExpiry:
    def test_no_leases(self):
        assert DemandStore().expire_leases(now=10**9) == []

    def test_grant_order_requeue(self):
        st = DemandStore()
        st.deposit_demand(demand(0))
        st.deposit_demand(demand(1))
        st.withdraw_pending("w1", now=0, lease_ms=50)   # grants demand 0
        st.withdraw_pending("w2", now=10, lease_ms=50)  # grants demand 1
        expired = st.expire_leases(now=100)
        assert expired == [canonical_signature(demand(0)), canonical_signature(demand(1))]
        assert st.withdraw_pending("w3", now=200, lease_ms=50) == demand(0)
        assert st.withdraw_pending("w3", now=200, lease_ms=50) == demand(1)

    def test_requeue_goes_to_head(self):
        st = DemandStore()
        st.deposit_demand(demand(0))
        st.withdraw_pending("w1", now=0, lease_ms=50)
        st.deposit_demand(demand(1))
        st.expire_leases(now=100)
        assert st.withdraw_pending("w2", now=200, lease_ms=50) == demand(0)

    def test_release_returns_to_head(self):
        st = DemandStore()
        st.deposit_demand(demand(0))
        st.deposit_demand(demand(1))
        got = st.withdraw_pending("w1", now=0, lease_ms=10_000)
        assert st.release(canonical_signature(got), "w1") is True
        assert st.release(canonical_signature(got), "w1") is False  # no longer leased
        assert st.withdraw_pending("w2", now=1, lease_ms=10_000) == demand(0)

    def test_release_worker_leases(self):
        st = DemandStore()
        for i in range(3):
            st.deposit_demand(demand(i))
        st.withdraw_pending("dead-1", now=0, lease_ms=10_000)
        st.withdraw_pending("alive", now=0, lease_ms=10_000)
        st.withdraw_pending("dead-2", now=0, lease_ms=10_000)
        requeued = st.release_worker_leases({"dead-1", "dead-2"})
        assert requeued == [canonical_signature(demand(0)), canonical_signature(demand(2))]
        assert st.withdraw_pending("w", now=1, lease_ms=10).params[0].payload == 0
        assert st.withdraw_pending("w", now=1, lease_ms=10).params[0].payload == 2


class TestWalAppend:
    def test_monotone_offsets(self, tmp_path):
        wal = WriteAheadLog(str(tmp_path / "w.log"))
        st = DemandStore(wal=wal, clock=lambda: 5)
        r0 = TransactionRecord(0, "sig0", TxOp.CANCEL, b"", 5)
        r1 = TransactionRecord(1, "sig1", TxOp.CANCEL, b"", 6)
        assert st.wal_append(r0) == 0
        assert st.wal_append(r1) == 1

    def test_non_increasing_txn_rejected(self, tmp_path):
        wal = WriteAheadLog(str(tmp_path / "w.log"))
        st = DemandStore(wal=wal)
        st.wal_append(TransactionRecord(3, "s", TxOp.CANCEL, b"", 0))
        with pytest.raises(InvalidRecord):
            st.wal_append(TransactionRecord(3, "s", TxOp.CANCEL, b"", 1))
        with pytest.raises(InvalidRecord):
            st.wal_append(TransactionRecord(2, "s", TxOp.CANCEL, b"", 1))

    def test_no_wal_is_unavailable(self):
        with pytest.raises(store_mod.StoreUnavailable):
            DemandStore().wal_append(TransactionRecord(0, "s", TxOp.CANCEL, b"", 0))

    def test_record_present_after_sigkill(self, tmp_path):
        wal_path = str(tmp_path / "crash.log")
        proc = subprocess.run(
            [sys.executable, os.path.join(HERE, "_wal_crash_child.py"), wal_path, "6", "4"],
            capture_output=True, timeout=60,
        )
        assert proc.returncode == -signal.SIGKILL
        records, _ = store_mod.read_records(wal_path)
        assert len(records) >= 4  # the 4 acknowledged ops each logged at least once


def replay_equals_oracle(ops, tmp_path, name):
    """Apply ops to a WAL-backed store, replay the log, compare to an
    in-memory oracle store fed the same ops."""
    wal_path = str(tmp_path / name)
    live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
    oracle = DemandStore(clock=lambda: 1000)
    for op, index in ops:
        apply_op(live, op, index)
        apply_op(oracle, op, index)
    live.close()
    replayed = store_mod.wal_replay(wal_path)
    # replay treats open leases as expired; give the oracle the same treatment
    oracle.expire_leases(now=10**15)
    replay_snap = audit_exclusive(replayed)
    oracle_snap = audit_exclusive(oracle)
    assert set(replay_snap["warehouse"]) == set(oracle_snap["warehouse"])
    for sig, res in replay_snap["warehouse"].items():
        assert res == oracle_snap["warehouse"][sig]
    assert sorted(replay_snap["pending"]) == sorted(oracle_snap["pending"])
    return replayed, oracle


class TestReplay:
    def test_empty_log(self, tmp_path):
        path = tmp_path / "empty.log"
        path.write_bytes(b"")
        replayed = store_mod.wal_replay(str(path))
        snap = replayed.state_snapshot()
        assert snap["warehouse"] == {} and snap["pending"] == []

    def test_basic_replay(self, tmp_path):
        # deposit d1, deposit d2, result(d1) -> d2 pending, d1 in warehouse
        wal_path = str(tmp_path / "basic.log")
        live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
        d1, d2 = demand(1), demand(2)
        live.deposit_demand(d1)
        live.deposit_demand(d2)
        live.withdraw_pending("w1", now=0, lease_ms=100)
        live.deposit_result(canonical_signature(d1), result_of(d1))
        live.close()
        replayed = store_mod.wal_replay(wal_path)
        snap = replayed.state_snapshot()
        assert snap["pending"] == [canonical_signature(d2).digest]
        assert set(snap["warehouse"]) == {canonical_signature(d1).digest}

    def test_open_lease_returns_to_pending_in_deposit_order(self, tmp_path):
        wal_path = str(tmp_path / "lease.log")
        live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
        for i in range(3):
            live.deposit_demand(demand(i))
        live.withdraw_pending("w1", now=0, lease_ms=10**9)  # crash with open lease
        live.close()
        replayed = store_mod.wal_replay(wal_path)
        assert replayed.state_snapshot()["pending"] == [
            canonical_signature(demand(i)).digest for i in range(3)]

    def test_scripted_workload_matches_oracle(self, tmp_path):
        replay_equals_oracle(scripted_ops(20), tmp_path, "scripted.log")

    def test_random_workloads_match_oracle(self, tmp_path):
        rng = random.Random(42)
        for case in range(10):
            ops = []
            deposited = 0
            for _ in range(rng.randrange(5, 40)):
                if deposited == 0 or rng.random() < 0.5:
                    ops.append(("deposit", deposited))
                    deposited += 1
                else:
                    ops.append(("complete", None))
            replay_equals_oracle(ops, tmp_path, "rand%d.log" % case)

    def test_truncated_tail_dropped(self, tmp_path):
        wal_path = str(tmp_path / "trunc.log")
        live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
        for op, index in scripted_ops(8):
            apply_op(live, op, index)
        live.close()
        data = open(wal_path, "rb").read()
        lines = data.split(b"\n")[:-1]
        # chop off part of the final record
        broken = b"\n".join(lines[:-1]) + b"\n" + lines[-1][: len(lines[-1]) // 2]
        open(wal_path, "wb").write(broken)
        replayed = store_mod.wal_replay(wal_path)
        records, _ = store_mod.read_records(wal_path)
        assert len(records) == len(lines) - 1
        audit_exclusive(replayed)

    def test_truncation_fuzz_matches_record_prefix(self, tmp_path):
        wal_path = str(tmp_path / "fuzz.log")
        live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
        for op, index in scripted_ops(10):
            apply_op(live, op, index)
        live.close()
        data = open(wal_path, "rb").read()
        rng = random.Random(7)
        for _ in range(25):
            cut = rng.randrange(0, len(data) + 1)
            head = data[:cut]
            cut_path = str(tmp_path / "fuzz_cut.log")
            open(cut_path, "wb").write(head)
            replayed = store_mod.wal_replay(cut_path)
            kept, _ = store_mod.read_records(cut_path)
            complete_lines = head.count(b"\n")
            assert len(kept) == complete_lines
            audit_exclusive(replayed)

    def test_corrupt_middle_raises(self, tmp_path):
        wal_path = str(tmp_path / "corrupt.log")
        live = DemandStore(wal=WriteAheadLog(wal_path), clock=lambda: 1000)
        for op, index in scripted_ops(6):
            apply_op(live, op, index)
        live.close()
        lines = open(wal_path, "rb").read().split(b"\n")
        lines[1] = b"garbage"
        open(wal_path, "wb").write(b"\n".join(lines))
        with pytest.raises(store_mod.CorruptLog):
            store_mod.wal_replay(wal_path)

    def test_kill_and_replay_then_complete(self, tmp_path):
        """Recovery after SIGKILL mid-workload converges to the oracle run."""
        n_demands = 12
        ops = scripted_ops(n_demands)
        oracle = DemandStore(clock=lambda: 1000)
        for op, index in ops:
            apply_op(oracle, op, index)
        drain(oracle)
        rng = random.Random(3)
        for _ in range(4):
            kill_after = rng.randrange(1, len(ops))
            wal_path = str(tmp_path / ("kill%d.log" % kill_after))
            proc = subprocess.run(
                [sys.executable, os.path.join(HERE, "_wal_crash_child.py"),
                 wal_path, str(n_demands), str(kill_after)],
                capture_output=True, timeout=60,
            )
            assert proc.returncode == -signal.SIGKILL, proc.stderr
            recovered = store_mod.recover(wal_path, clock=lambda: 1000)
            for i in range(n_demands):  # finish depositing anything the child missed
                recovered.deposit_demand(make_demand(i))
            drain(recovered)
            snap = audit_exclusive(recovered)
            oracle_snap = oracle.state_snapshot()
            assert set(snap["warehouse"]) == set(oracle_snap["warehouse"])
            for sig in snap["warehouse"]:
                assert snap["warehouse"][sig].value == oracle_snap["warehouse"][sig].value
            recovered.close()

    def test_recover_continues_journaling(self, tmp_path):
        wal_path = str(tmp_path / "cont.log")
        live = store_mod.recover(wal_path, clock=lambda: 1000)
        live.deposit_demand(demand(0))
        live.close()
        again = store_mod.recover(wal_path, clock=lambda: 1000)
        again.deposit_demand(demand(1))
        again.close()
        final = store_mod.wal_replay(wal_path)
        assert final.state_snapshot()["pending"] == [
            canonical_signature(demand(0)).digest, canonical_signature(demand(1)).digest]


class TestNoEviction:
    def test_warehouse_monotone(self):
        st = DemandStore()
        sizes = []
        for i in range(6):
            d = demand(i)
            st.deposit_demand(d)
            st.withdraw_pending("w1", now=0, lease_ms=100)
            st.deposit_result(canonical_signature(d), result_of(d, value=i))
            st.cancel(canonical_signature(d))
            sizes.append(st.warehouse_size())
        assert sizes == sorted(sizes)
        assert sizes[-1] == 6


class TestConcurrentDedupe:
    def test_single_enqueued_under_concurrency(self):
        import threading
        st = DemandStore()
        outcomes = []
        lock = threading.Lock()

        def depositor():
            out = st.deposit_demand(demand())
            with lock:
                outcomes.append(out.status)

        threads = [threading.Thread(target=depositor) for _ in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert outcomes.count(DepositStatus.ENQUEUED) == 1
        assert outcomes.count(DepositStatus.ALREADY_PENDING) == 15
