"""The manager daemon's HTTP surface for operators and the console.

Routes (all bodies are JSON; responses are canonical text):

    GET    /v1/topology               live snapshot
    POST   /v1/nodes                  register {node_name, address, color}
    POST   /v1/nodes/{id}/start|stop  lifecycle
    POST   /v1/nodes/{id}/kill        fault injection (host dies)
    POST   /v1/tiers                  allocate {node_id, kind, config?}
    DELETE /v1/tiers/{id}             deallocate
    POST   /v1/evaluations            start {source, window_len?, poles?, ...}
    GET    /v1/evaluations/{id}       state + ranked result when done
    DELETE /v1/evaluations/{id}       cancel
    GET    /v1/events                 line-delimited event stream (server push)
    GET    /v1/network                save the current topology document
    PUT    /v1/network                load a topology document

Every mutation delegates to the corresponding manager operation; the API
layer adds no semantics of its own. The event stream fans out from a
bounded per-subscriber buffer; subscribers that fall behind are dropped.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Tuple

from . import canon, netdoc
from .autonomic import NoReplacementNode, UnknownEvent
from .config import BadExtension, Configuration, ParseError
from .marf import plan as marf_plan
from .marf.audio import SineSpec, UnsupportedFormat
from .model import Context, MalformedEncoding
from .netdoc import IntegrityError
from .runtime import GridRuntime, UnknownEvaluation, UnknownTier
from .tiers import (
    BadAddress,
    EvaluationTimeout,
    IllegalTransition,
    NodeNotStarted,
    NoDstAvailable,
    StageFailed,
    TierKind,
    UnknownInstance,
    UnknownNode,
)

log = logging.getLogger(__name__)

EVENT_BUFFER = 1000

_ERROR_STATUS = (
    ((UnknownNode, UnknownTier, UnknownInstance, UnknownEvaluation, KeyError), 404),
    ((IllegalTransition, NodeNotStarted, NoDstAvailable, NoReplacementNode), 409),
    ((BadAddress, BadExtension, ParseError, IntegrityError, MalformedEncoding,
      UnsupportedFormat, marf_plan.BadParams, UnknownEvent, ValueError, TypeError), 400),
)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _status_for(exc: Exception) -> Tuple[int, str]:
    for types, status in _ERROR_STATUS:
        if isinstance(exc, types):
            return status, type(exc).__name__
    return 500, type(exc).__name__


class EventBroadcaster:
    """Fan-out of manager events to streaming subscribers."""

    def __init__(self, capacity: int = EVENT_BUFFER):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._subscribers = []

    def subscribe(self) -> "queue.Queue":
        q = queue.Queue(maxsize=self.capacity)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q):
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def publish(self, event):
        tree = event.to_tree()
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait(tree)
            except queue.Full:
                # slow subscriber: disconnect instead of blocking the grid
                self.unsubscribe(q)
                try:
                    q.get_nowait()  # make room for the drop marker
                    q.put_nowait(None)
                except (queue.Empty, queue.Full):
                    pass


class GridDaemon:
    """A GridRuntime plus its HTTP server and MARF workload defaults."""

    def __init__(self, config: Optional[Configuration] = None,
                 bind: str = "127.0.0.1:8080"):
        self.config = config or Configuration()
        self.grid = GridRuntime(config=self.config)
        self.broadcaster = EventBroadcaster(
            capacity=self.config.get_int("api.event_buffer", EVENT_BUFFER))
        self.grid.engine.add_sink(self.broadcaster.publish)
        self._training_lock = threading.Lock()
        self._training_set = None
        host, _, port = bind.partition(":")
        handler = _make_handler(self)
        self.server = ThreadingHTTPServer((host, int(port or 8080)), handler)
        self.server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self.server.server_address[:2]

    def start(self) -> "GridDaemon":
        self.grid.start_monitor()
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name="api-server", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.grid.shutdown()

    # -- workload support -----------------------------------------------------

    def training_set(self):
        """The daemon's training clusters, bootstrapped once from config."""
        with self._training_lock:
            if self._training_set is None:
                self._training_set = self._bootstrap_training()
            return self._training_set

    def _bootstrap_training(self):
        from .marf.classify import TrainingSet, train
        from .marf import audio
        from .marf.features import lpc_features
        spec = self.config.get("marf.train.freqs", "200,450,800")
        if spec == "off":
            return TrainingSet()
        instances = self.config.get_int("marf.train.instances", 5)
        noise = self.config.get_float("marf.train.noise", 0.01)
        n = self.config.get_int("marf.train.samples", 2048)
        rate = self.config.get_int("marf.sample_rate", 8000)
        window_len = self.config.get_int("marf.window_len", 128)
        poles = self.config.get_int("marf.poles", 20)
        threshold = self.config.get_float("marf.silence_threshold", 0.01)
        ts = TrainingSet()
        for subject, field in enumerate(spec.split(","), start=1):
            freq = float(field)
            for instance in range(instances):
                sine = SineSpec(freq=freq, rate=rate, n=n, noise_amplitude=noise,
                                seed=7000 + subject * 100 + instance)
                sample = audio.load_sample(sine)
                sample = audio.remove_noise(sample)
                sample = audio.remove_silence(sample, threshold)
                sample = audio.normalize(sample)
                ts = train(ts, subject, lpc_features(sample, window_len, poles))
        return ts

    def build_geer(self, body: dict):
        source_tree = body.get("source")
        if not isinstance(source_tree, dict):
            raise ValueError("evaluation body must carry a source object")
        kind = source_tree.get("kind")
        if kind == "sine":
            source = SineSpec(
                freq=float(source_tree["freq"]),
                rate=int(source_tree.get("rate", self.config.get_int("marf.sample_rate", 8000))),
                n=int(source_tree.get("n", self.config.get_int("marf.train.samples", 2048))),
                noise_amplitude=float(source_tree.get("noise", 0.0)),
                seed=int(source_tree.get("seed", 0)))
        elif kind == "wav":
            source = str(source_tree["path"])
        else:
            raise ValueError("source.kind must be 'sine' or 'wav'")
        return marf_plan.build_marf_geer(
            source,
            window_len=int(body.get("window_len", self.config.get_int("marf.window_len", 128))),
            poles=int(body.get("poles", self.config.get_int("marf.poles", 20))),
            silence_threshold=float(body.get(
                "silence_threshold", self.config.get_float("marf.silence_threshold", 0.01))),
            training_set=self.training_set())

    # -- route handlers --------------------------------------------------------

    def handle(self, method: str, path: str, body) -> Tuple[int, dict]:
        grid = self.grid
        if method == "GET" and path == "/v1/topology":
            return 200, grid.gmt_snapshot()
        if method == "POST" and path == "/v1/nodes":
            reg = grid.register_node(body["node_name"], body["address"], body["color"],
                                     instance_id=body.get("instance_id"))
            return 201, reg.to_tree()
        match = re.fullmatch(r"/v1/nodes/([^/]+)/(start|stop|kill)", path)
        if method == "POST" and match:
            node_id, action = match.groups()
            if action == "kill":
                grid.kill_node(node_id)
                return 200, {"node_id": node_id, "killed": 1}
            reg = grid.node_lifecycle(node_id, action.capitalize())
            return 200, reg.to_tree()
        if method == "POST" and path == "/v1/tiers":
            config = Configuration(body.get("config") or {})
            reg = grid.allocate_tier(body["node_id"], TierKind(body["kind"]),
                                     config=config, bind_to=body.get("bind_to"))
            return 201, reg.to_tree()
        match = re.fullmatch(r"/v1/tiers/([^/]+)", path)
        if method == "DELETE" and match:
            if not grid.deallocate_tier(match.group(1)):
                raise ApiError(404, "UnknownTier", "no tier %s" % match.group(1))
            return 200, {"deallocated": match.group(1)}
        if method == "POST" and path == "/v1/evaluations":
            geer = self.build_geer(body)
            context = Context({str(k): int(v)
                               for k, v in (body.get("context") or {}).items()})
            timeout = float(body["timeout_s"]) if "timeout_s" in body else None
            handle = grid.start_evaluation(geer, context, timeout=timeout)
            return 202, handle.to_tree()
        match = re.fullmatch(r"/v1/evaluations/([^/]+)", path)
        if match and method == "GET":
            handle = grid.evaluations.get(match.group(1))
            if handle is None:
                raise ApiError(404, "UnknownEvaluation", "no evaluation %s" % match.group(1))
            return 200, handle.to_tree()
        if match and method == "DELETE":
            handle = grid.cancel_evaluation(match.group(1))
            return 200, handle.to_tree()
        if method == "GET" and path == "/v1/network":
            return 200, netdoc.save_network(grid)
        if method == "PUT" and path == "/v1/network":
            return 200, netdoc.load_network(grid, body)
        raise ApiError(404, "NoSuchRoute", "%s %s is not a route" % (method, path))


def _make_handler(daemon: GridDaemon):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("api: " + fmt, *args)

        def _read_body(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return None
            raw = self.rfile.read(length)
            try:
                return json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ApiError(400, "MalformedBody", str(exc)) from exc

        def _send_tree(self, status: int, tree):
            payload = canon.text_encode(tree)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(payload)

        def _dispatch(self, method: str):
            try:
                if method == "GET" and self.path == "/v1/events":
                    return self._stream_events()
                body = self._read_body()
                status, tree = daemon.handle(method, self.path, body)
                self._send_tree(status, tree)
            except ApiError as exc:
                self._send_tree(exc.status, {"code": exc.code, "message": exc.message})
            except Exception as exc:  # map module errors to machine-readable codes
                status, code = _status_for(exc)
                if status == 500:
                    log.exception("api failure on %s %s", method, self.path)
                self._send_tree(status, {"code": code, "message": str(exc)})

        def _stream_events(self):
            subscription = daemon.broadcaster.subscribe()
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Connection", "close")
            self.close_connection = True
            self.end_headers()
            try:
                while True:
                    try:
                        tree = subscription.get(timeout=15.0)
                    except queue.Empty:
                        self.wfile.write(b":keepalive\n\n")
                        self.wfile.flush()
                        continue
                    if tree is None:
                        return  # dropped for falling behind
                    self.wfile.write(b"data: " + canon.text_encode(tree) + b"\n\n")
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                daemon.broadcaster.unsubscribe(subscription)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PUT(self):
            self._dispatch("PUT")

        def do_DELETE(self):
            self._dispatch("DELETE")

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET,POST,PUT,DELETE")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.end_headers()

    return Handler


def serve_api(config: Optional[Configuration] = None,
              bind: str = "127.0.0.1:8080") -> GridDaemon:
    """Build and start a daemon; returns it (call .stop() to shut down)."""
    return GridDaemon(config=config, bind=bind).start()
