"""Demand migration: framing, authentication, negotiation, dispatch.

Remote tiers reach a demand store through transport agents speaking a
fixed frame layout:

    magic "EDMF" | version u8 | msg_kind u8 | payload_len u32 BE | payload
    | HMAC-SHA256(header + payload) (32 bytes)

The payload is a canonical tree in either the text or the binary encoding
(first byte disambiguates), wrapped as {"rid": n, "body": ...} so that
retransmitted requests and duplicated replies can be correlated. Effects
are made exactly-once by the store itself: demand deposits dedupe on
signature, result deposits are first-write-wins, so a dispatcher may
retransmit freely until it sees an acknowledgement.

Generators co-located with their store skip all of this through
LocalStoreClient, the degenerate transport agent.
"""

from __future__ import annotations

import hmac as hmac_mod
import hashlib
import logging
import queue as queue_mod
import socket
import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Iterable, Optional, Set, Tuple

from . import canon
from .canon import MalformedEncoding
from .model import (
    Demand,
    DemandResult,
    SignatureKey,
    Value,
    canonical_signature,
)
from .store import DemandStore, DepositOutcome, DepositStatus, ResultAck

log = logging.getLogger(__name__)

MAGIC = b"EDMF"
VERSION = 1
HEADER_LEN = 10
MAC_LEN = 32
MAX_PAYLOAD = 16 * 1024 * 1024


class MsgKind(IntEnum):
    DEPOSIT_DEMAND = 0
    WITHDRAW = 1
    DEPOSIT_RESULT = 2
    LOOKUP = 3
    ACK = 4
    HELLO = 5
    ERR = 6
    EVENT = 7


class ProtocolId(str, Enum):
    IN_PROC = "InProc"
    TCP_TEXT = "TcpText"
    TCP_BINARY = "TcpBinary"


# fixed total preference order, best first
_PREFERENCE = (ProtocolId.TCP_BINARY, ProtocolId.TCP_TEXT, ProtocolId.IN_PROC)


class NoCommonProtocol(RuntimeError):
    pass


class BadMagic(ValueError):
    pass


class BadVersion(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class BadSignature(ValueError):
    pass


class Unreachable(RuntimeError):
    """Retries exhausted without an acknowledgement."""


class Rejected(RuntimeError):
    """The store answered with an error."""

    def __init__(self, code: str, message: str = ""):
        super().__init__("%s: %s" % (code, message))
        self.code = code
        self.message = message


def negotiate_protocol(local_caps: Set[ProtocolId], remote_caps: Set[ProtocolId]) -> ProtocolId:
    """Highest-preference protocol both peers support; deterministic."""
    if not local_caps or not remote_caps:
        raise NoCommonProtocol("capability sets must be non-empty")
    common = set(local_caps) & set(remote_caps)
    for candidate in _PREFERENCE:
        if candidate in common:
            return candidate
    raise NoCommonProtocol("no protocol in common: %s vs %s" % (local_caps, remote_caps))


# ---------------------------------------------------------------------------
# Frames


@dataclass(frozen=True)
class Frame:
    msg_kind: int
    payload: bytes


def frame_encode(msg_kind: int, payload: bytes, key: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload exceeds 16 MiB")
    header = MAGIC + struct.pack(">BBI", VERSION, msg_kind, len(payload))
    mac = hmac_mod.new(key, header + payload, hashlib.sha256).digest()
    return header + payload + mac


def frame_decode(data: bytes, key: bytes) -> Frame:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("frame does not start with EDMF")
    if len(data) < HEADER_LEN:
        raise LengthMismatch("frame shorter than its header")
    version, msg_kind, payload_len = struct.unpack(">BBI", data[4:HEADER_LEN])
    if version != VERSION:
        raise BadVersion("unsupported frame version %d" % version)
    if payload_len > MAX_PAYLOAD or HEADER_LEN + payload_len + MAC_LEN != len(data):
        raise LengthMismatch(
            "payload_len %d does not match frame of %d bytes" % (payload_len, len(data)))
    body = data[:HEADER_LEN + payload_len]
    mac = data[HEADER_LEN + payload_len:]
    want = hmac_mod.new(key, body, hashlib.sha256).digest()
    if not hmac_mod.compare_digest(mac, want):
        raise BadSignature("frame HMAC verification failed")
    return Frame(msg_kind=msg_kind, payload=data[HEADER_LEN:HEADER_LEN + payload_len])


def payload_encode(tree, protocol: ProtocolId) -> bytes:
    if protocol is ProtocolId.TCP_BINARY:
        return canon.binary_encode(tree)
    return canon.text_encode(tree)


# ---------------------------------------------------------------------------
# Channels: a byte-frame pipe with a timeout'd receive


class ChannelClosed(OSError):
    pass


class TcpChannel:
    """Client side of a framed TCP connection."""

    def __init__(self, host: str, port: int, connect_timeout: float = 2.0):
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._recv_buf = b""

    def send(self, frame_bytes: bytes):
        try:
            self._sock.sendall(frame_bytes)
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def recv(self, timeout: float) -> Optional[bytes]:
        try:
            self._sock.settimeout(timeout)
            return recv_frame_bytes(self._sock)
        except socket.timeout:
            return None
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def recv_frame_bytes(sock) -> bytes:
    """Read exactly one frame off a socket; raises ChannelClosed at EOF."""
    header = _recv_exact(sock, HEADER_LEN)
    if header[:4] != MAGIC:
        # cannot resync a desynchronized stream; surface as a bad frame
        return header
    payload_len = struct.unpack(">I", header[6:10])[0]
    if payload_len > MAX_PAYLOAD:
        return header  # decoder will flag LengthMismatch
    rest = _recv_exact(sock, payload_len + MAC_LEN)
    return header + rest


def _recv_exact(sock, count: int) -> bytes:
    buf = b""
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            raise ChannelClosed("connection closed")
        buf += chunk
    return buf


class QueueChannel:
    """In-memory channel endpoint; the lossy-link simulator builds on these."""

    def __init__(self, outbox, inbox):
        self._outbox = outbox
        self._inbox = inbox

    def send(self, frame_bytes: bytes):
        self._outbox(frame_bytes)

    def recv(self, timeout: float) -> Optional[bytes]:
        try:
            return self._inbox.get(timeout=timeout)
        except queue_mod.Empty:
            return None

    def close(self):
        pass


# ---------------------------------------------------------------------------
# Store clients


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    timeout: float = 0.5
    base_backoff: float = 0.1
    backoff_factor: float = 2.0
    max_backoff: float = 2.0  # keep retry cadence well inside lease windows


@dataclass(frozen=True)
class DispatchReceipt:
    signature: SignatureKey
    outcome: DepositOutcome
    attempts: int  # sends, not effects


class LocalStoreClient:
    """Dummy transport agent for a co-located store: no framing at all."""

    def __init__(self, store: DemandStore):
        self.store = store
        self.protocol = ProtocolId.IN_PROC

    def deposit_demand(self, demand: Demand) -> DepositOutcome:
        return self.store.deposit_demand(demand)

    def withdraw(self, worker_id: str, lease_ms: int) -> Optional[Demand]:
        return self.store.withdraw_pending(worker_id, lease_ms=lease_ms)

    def release(self, sig: SignatureKey, worker_id: str) -> bool:
        return self.store.release(sig, worker_id)

    def cancel(self, sig: SignatureKey) -> bool:
        return self.store.cancel(sig)

    def deposit_result(self, sig: SignatureKey, result: DemandResult) -> ResultAck:
        return self.store.deposit_result(sig, result)

    def lookup(self, sig: SignatureKey) -> Optional[DemandResult]:
        return self.store.lookup(sig)

    def wait_for_result(self, sig: SignatureKey, timeout: float,
                        requester_id: str = "?") -> Optional[DemandResult]:
        return self.store.wait_for_result(sig, timeout, requester_id)

    def set_protocol(self, protocol: ProtocolId):
        pass

    def close(self):
        pass


class RemoteStoreClient:
    """RPC to a remote store over a frame channel, with retransmission.

    Retransmits carry the same request id; stale or duplicated replies are
    discarded by rid matching, and the store's signature dedupe makes the
    effect count independent of the number of sends.
    """

    def __init__(self, channel, secret: bytes, protocol: ProtocolId = ProtocolId.TCP_TEXT,
                 retry: RetryPolicy = RetryPolicy(), channel_factory=None):
        self._channel = channel
        self._secret = secret
        self.protocol = protocol
        self.retry = retry
        self._channel_factory = channel_factory
        self._rid = 0
        self._lock = threading.Lock()
        self.send_count = 0

    def set_protocol(self, protocol: ProtocolId):
        """Hot-plug the payload encoding; takes effect on the next request."""
        if protocol is ProtocolId.IN_PROC:
            raise ValueError("cannot switch a remote link to InProc")
        with self._lock:
            self.protocol = protocol

    def close(self):
        self._channel.close()

    # -- plumbing ----------------------------------------------------------

    def _call(self, msg_kind: int, body, retry: Optional[RetryPolicy] = None):
        policy = retry or self.retry
        with self._lock:
            self._rid += 1
            rid = self._rid
            request = {"rid": rid, "body": body}
            payload = payload_encode(request, self.protocol)
            frame = frame_encode(msg_kind, payload, self._secret)
            backoff = policy.base_backoff
            attempts = 0
            last_error = None
            while attempts < policy.max_attempts:
                attempts += 1
                try:
                    self._channel.send(frame)
                    self.send_count += 1
                    reply = self._await_reply(rid, policy.timeout)
                    if reply is not None:
                        kind, tree = reply
                        if kind == MsgKind.ERR:
                            raise Rejected(tree.get("code", "Err"), tree.get("message", ""))
                        return tree.get("body"), attempts
                except ChannelClosed as exc:
                    last_error = exc
                    self._reconnect()
                time.sleep(backoff)
                backoff = min(backoff * policy.backoff_factor, policy.max_backoff)
            raise Unreachable(
                "no acknowledgement after %d attempts%s" % (
                    attempts, (": %s" % last_error) if last_error else ""))

    def _await_reply(self, rid: int, timeout: float):
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            data = self._channel.recv(remaining)
            if data is None:
                return None
            try:
                frame = frame_decode(data, self._secret)
                tree = canon.decode_any(frame.payload)
            except (ValueError, MalformedEncoding):
                continue  # tampered or foreign frame: ignore, keep waiting
            if not isinstance(tree, dict) or tree.get("rid") != rid:
                continue  # duplicate or stale reply
            return frame.msg_kind, tree

    def _reconnect(self):
        if self._channel_factory is None:
            return
        try:
            self._channel.close()
            self._channel = self._channel_factory()
        except OSError:
            pass

    # -- store operations ----------------------------------------------------

    def hello(self, caps: Iterable[ProtocolId]) -> Set[ProtocolId]:
        body = {"caps": [c.value for c in caps]}
        tree, _ = self._call(MsgKind.HELLO, body)
        return {ProtocolId(c) for c in tree["caps"]}

    def deposit_demand(self, demand: Demand) -> DepositOutcome:
        tree, _ = self._call(MsgKind.DEPOSIT_DEMAND, demand.to_tree())
        return _deposit_outcome_from_tree(tree)

    def dispatch(self, demand: Demand, retry: Optional[RetryPolicy] = None) -> DispatchReceipt:
        tree, attempts = self._call(MsgKind.DEPOSIT_DEMAND, demand.to_tree(), retry)
        return DispatchReceipt(signature=canonical_signature(demand),
                               outcome=_deposit_outcome_from_tree(tree), attempts=attempts)

    def withdraw(self, worker_id: str, lease_ms: int) -> Optional[Demand]:
        body = Demand.system("dst", "withdraw", params=(
            Value.of_text(worker_id), Value.of_int(lease_ms))).to_tree()
        tree, _ = self._call(MsgKind.WITHDRAW, body)
        if tree["outcome"] == "none":
            return None
        return Demand.from_tree(tree["demand"])

    def release(self, sig: SignatureKey, worker_id: str) -> bool:
        body = Demand.system("dst", "release", params=(
            Value.of_text(sig.digest), Value.of_text(worker_id))).to_tree()
        tree, _ = self._call(MsgKind.WITHDRAW, body)
        return tree["outcome"] == "released"

    def cancel(self, sig: SignatureKey) -> bool:
        body = Demand.system("dst", "cancel", params=(Value.of_text(sig.digest),)).to_tree()
        tree, _ = self._call(MsgKind.WITHDRAW, body)
        return tree["outcome"] == "cancelled"

    def deposit_result(self, sig: SignatureKey, result: DemandResult) -> ResultAck:
        tree, _ = self._call(MsgKind.DEPOSIT_RESULT, result.to_tree())
        return ResultAck(tree["outcome"])

    def lookup(self, sig: SignatureKey) -> Optional[DemandResult]:
        tree, _ = self._call(MsgKind.LOOKUP, {"sig": sig.digest, "wait_ms": 0})
        if tree["outcome"] == "none":
            return None
        return DemandResult.from_tree(tree["result"])

    def wait_for_result(self, sig: SignatureKey, timeout: float,
                        requester_id: str = "?") -> Optional[DemandResult]:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            wait_ms = int(min(remaining, 2.0) * 1000)
            tree, _ = self._call(MsgKind.LOOKUP, {"sig": sig.digest, "wait_ms": wait_ms})
            if tree["outcome"] == "result":
                return DemandResult.from_tree(tree["result"])
            if tree["outcome"] == "orphaned":
                return None


def _deposit_outcome_from_tree(tree) -> DepositOutcome:
    status = DepositStatus(tree["outcome"])
    result = None
    if status is DepositStatus.CACHED:
        result = DemandResult.from_tree(tree["result"])
    return DepositOutcome(status, result)


def dispatch_demand(demand: Demand, endpoint, retry_policy: Optional[RetryPolicy] = None
                    ) -> DispatchReceipt:
    """Send a demand, await its acknowledgement, retransmitting on loss.

    *endpoint* is a store client (remote or local); duplicates caused by
    retransmission are absorbed by the store's signature dedupe.
    """
    if isinstance(endpoint, RemoteStoreClient):
        return endpoint.dispatch(demand, retry_policy)
    outcome = endpoint.deposit_demand(demand)
    return DispatchReceipt(signature=canonical_signature(demand), outcome=outcome, attempts=1)


# ---------------------------------------------------------------------------
# Server side


class FrameHandler:
    """Translates one authenticated frame into store operations.

    Shared by the TCP server and the in-memory simulators; every decode
    failure is reported to the security monitor before an Err reply is
    produced, and nothing about an unverified frame is trusted.
    """

    def __init__(self, store: DemandStore, secret: bytes,
                 caps: Iterable[ProtocolId] = (ProtocolId.TCP_TEXT, ProtocolId.TCP_BINARY),
                 security_monitor: Optional[Callable[[str, str], None]] = None,
                 event_sink: Optional[Callable[[dict], None]] = None,
                 deposit_observer: Optional[Callable[[str, ProtocolId], None]] = None):
        self.store = store
        self.secret = secret
        self.caps = tuple(caps)
        self.security_monitor = security_monitor
        self.event_sink = event_sink
        self.deposit_observer = deposit_observer

    def handle(self, data: bytes, peer: str = "?") -> Optional[bytes]:
        try:
            frame = frame_decode(data, self.secret)
        except (BadMagic, BadVersion, LengthMismatch, BadSignature) as exc:
            self._flag(type(exc).__name__, peer)
            return self._err(None, type(exc).__name__, str(exc), ProtocolId.TCP_TEXT)
        try:
            request = canon.decode_any(frame.payload)
            if not isinstance(request, dict) or not isinstance(request.get("rid"), int):
                raise MalformedEncoding("request must carry an integer rid")
        except MalformedEncoding as exc:
            self._flag("MalformedPayload", peer)
            return self._err(None, "MalformedPayload", str(exc), ProtocolId.TCP_TEXT)
        protocol = (ProtocolId.TCP_BINARY if frame.payload[:1][0] < 0x10
                    else ProtocolId.TCP_TEXT)
        rid = request["rid"]
        try:
            body = self._dispatch(frame.msg_kind, request.get("body"), protocol)
        except Rejected as exc:
            return self._err(rid, exc.code, exc.message, protocol)
        except (MalformedEncoding, ValueError, KeyError, TypeError) as exc:
            self._flag("MalformedPayload", peer)
            return self._err(rid, "MalformedPayload", str(exc), protocol)
        reply = {"rid": rid, "body": body}
        return frame_encode(MsgKind.ACK, payload_encode(reply, protocol), self.secret)

    def _flag(self, code: str, peer: str):
        if self.security_monitor is not None:
            self.security_monitor(code, peer)

    def _err(self, rid: Optional[int], code: str, message: str,
             protocol: ProtocolId) -> bytes:
        tree = {"code": code, "message": message}
        if rid is not None:
            tree["rid"] = rid
        return frame_encode(MsgKind.ERR, payload_encode(tree, protocol), self.secret)

    def _dispatch(self, msg_kind: int, body, protocol: ProtocolId = ProtocolId.TCP_TEXT):
        if msg_kind == MsgKind.DEPOSIT_DEMAND:
            demand = Demand.from_tree(body)
            outcome = self.store.deposit_demand(demand)
            if self.deposit_observer is not None:
                self.deposit_observer(canonical_signature(demand).digest, protocol)
            tree = {"outcome": outcome.status.value}
            if outcome.status is DepositStatus.CACHED:
                tree["result"] = outcome.result.to_tree()
            return tree
        if msg_kind == MsgKind.WITHDRAW:
            return self._queue_op(Demand.from_tree(body))
        if msg_kind == MsgKind.DEPOSIT_RESULT:
            result = DemandResult.from_tree(body)
            ack = self.store.deposit_result(result.signature, result)
            return {"outcome": ack.value}
        if msg_kind == MsgKind.LOOKUP:
            sig = SignatureKey(body["sig"])
            wait_ms = body.get("wait_ms", 0)
            if wait_ms > 0:
                result = self.store.wait_for_result(sig, min(wait_ms, 5000) / 1000.0)
            else:
                result = self.store.lookup(sig)
            if result is None:
                if self.store.is_orphaned(sig.digest):
                    return {"outcome": "orphaned"}
                return {"outcome": "none"}
            return {"outcome": "result", "result": result.to_tree()}
        if msg_kind == MsgKind.HELLO:
            return {"caps": [c.value for c in self.caps]}
        if msg_kind == MsgKind.EVENT:
            if self.event_sink is not None:
                self.event_sink(body)
            return {"outcome": "noted"}
        raise Rejected("UnknownMsgKind", "no handler for msg_kind %d" % msg_kind)

    def _queue_op(self, demand: Demand):
        op = demand.system_demand_type_id
        params = demand.params
        if op == "withdraw":
            worker_id = params[0].payload
            lease_ms = params[1].payload
            got = self.store.withdraw_pending(worker_id, lease_ms=lease_ms)
            if got is None:
                return {"outcome": "none"}
            return {"outcome": "demand", "demand": got.to_tree()}
        if op == "release":
            ok = self.store.release(SignatureKey(params[0].payload), params[1].payload)
            return {"outcome": "released" if ok else "noop"}
        if op == "cancel":
            ok = self.store.cancel(SignatureKey(params[0].payload))
            return {"outcome": "cancelled" if ok else "noop"}
        raise Rejected("UnknownQueueOp", "no queue op %r" % op)


class TransportServer:
    """Accepts framed TCP connections and serves a store; one thread per
    connection, any single connection failure is contained."""

    def __init__(self, store: DemandStore, secret: bytes, host: str = "127.0.0.1",
                 port: int = 0, **handler_kwargs):
        self.handler = FrameHandler(store, secret, **handler_kwargs)
        self._listener = socket.create_server((host, port))
        self._stop = threading.Event()
        self._threads = []
        self._accept_thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self) -> "TransportServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="ta-accept", daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            thread = threading.Thread(target=self._serve_connection, args=(conn, addr),
                                      name="ta-conn", daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, conn, addr):
        peer = "%s:%d" % addr[:2]
        try:
            while not self._stop.is_set():
                try:
                    data = recv_frame_bytes(conn)
                except ChannelClosed:
                    return
                reply = self.handler.handle(data, peer=peer)
                if reply is not None:
                    conn.sendall(reply)
        except OSError:
            pass
        except Exception:  # a bad connection must never kill the server
            log.exception("connection handler failed for %s", peer)
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass


def ta_serve(store: DemandStore, secret: bytes, host: str = "127.0.0.1", port: int = 0,
             **handler_kwargs) -> TransportServer:
    """Bind and start a transport agent serving *store*; returns the server."""
    return TransportServer(store, secret, host=host, port=port, **handler_kwargs).start()


def connect_store(host: str, port: int, secret: bytes,
                  caps: Iterable[ProtocolId] = (ProtocolId.TCP_TEXT, ProtocolId.TCP_BINARY),
                  retry: RetryPolicy = RetryPolicy()) -> RemoteStoreClient:
    """Dial a transport agent and negotiate the payload encoding."""
    caps = set(caps)

    def factory():
        return TcpChannel(host, port)

    client = RemoteStoreClient(factory(), secret, protocol=ProtocolId.TCP_TEXT,
                               retry=retry, channel_factory=factory)
    remote_caps = client.hello(caps)
    client.set_protocol(negotiate_protocol(caps - {ProtocolId.IN_PROC},
                                           remote_caps - {ProtocolId.IN_PROC}))
    return client
