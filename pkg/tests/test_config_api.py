"""Configuration files, the HTTP API, and the CLI surface."""

import json
import socket
import threading
import time

import httpx
import pytest

from edgrid import cli
from edgrid.api import GridDaemon
from edgrid.config import BadExtension, Configuration, ParseError, load_config


def free_bind():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    host, port = probe.getsockname()
    probe.close()
    return "%s:%d" % (host, port)


class TestLoadConfig:
    def test_parse_with_comment(self, tmp_path):
        path = tmp_path / "a.config"
        path.write_text("dst.wal.path=/tmp/w.log\n# c\n")
        config = load_config(str(path))
        assert config.as_dict() == {"dst.wal.path": "/tmp/w.log"}

    def test_empty_file(self, tmp_path):
        path = tmp_path / "b.config"
        path.write_text("")
        assert load_config(str(path)).as_dict() == {}

    def test_last_duplicate_wins(self, tmp_path):
        path = tmp_path / "c.config"
        path.write_text("a=1\na=2\n")
        assert load_config(str(path)).get("a") == "2"

    def test_inline_comment_and_blank_lines(self, tmp_path):
        path = tmp_path / "d.config"
        path.write_text("\n  key = value # trailing\n\n# whole line\n")
        assert load_config(str(path)).as_dict() == {"key": "value"}

    def test_bad_extension(self, tmp_path):
        path = tmp_path / "e.cfg"
        path.write_text("a=1\n")
        with pytest.raises(BadExtension):
            load_config(str(path))

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "f.config"
        path.write_text("a=1\nnot a pair\n")
        with pytest.raises(ParseError) as info:
            load_config(str(path))
        assert info.value.line_no == 2

    def test_clone_shares_nothing(self):
        config = Configuration({"a": "1"})
        clone = config.clone()
        clone.set("a", "9")
        assert config.get("a") == "1"


@pytest.fixture(scope="module")
def daemon():
    config = Configuration({
        "heartbeat.interval_ms": "100",
        "marf.train.samples": "1024",
        "marf.window_len": "64",
        "marf.poles": "10",
        "marf.train.instances": "3",
    })
    daemon = GridDaemon(config=config, bind=free_bind()).start()
    yield daemon
    daemon.stop()


def url(daemon, path):
    host, port = daemon.address
    return "http://%s:%d%s" % (host, port, path)


class TestApi:
    def test_fresh_topology_is_empty(self, daemon):
        body = httpx.get(url(daemon, "/v1/topology")).json()
        assert body["nodes"] == [] and body["tiers"] == []

    def test_node_tier_evaluation_flow(self, daemon):
        node = httpx.post(url(daemon, "/v1/nodes"), json={
            "node_name": "api-n1", "address": "127.0.0.1:7101",
            "color": "#ff0000"}).json()
        assert node["status"] == "Registered"
        started = httpx.post(url(daemon, "/v1/nodes/%s/start" % node["node_id"])).json()
        assert started["status"] == "Started"
        for kind in ("DST", "DGT", "DWT"):
            created = httpx.post(url(daemon, "/v1/tiers"), json={
                "node_id": node["node_id"], "kind": kind})
            assert created.status_code == 201, created.text
        topology = httpx.get(url(daemon, "/v1/topology")).json()
        assert {t["kind"] for t in topology["tiers"]} == {"DST", "DGT", "DWT"}

        accepted = httpx.post(url(daemon, "/v1/evaluations"), json={
            "source": {"kind": "sine", "freq": 450.0, "n": 1024,
                       "noise": 0.01, "seed": 1234},
            "timeout_s": 30.0})
        assert accepted.status_code == 202, accepted.text
        evaluation_id = accepted.json()["evaluation_id"]
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            state = httpx.get(url(daemon, "/v1/evaluations/%s" % evaluation_id)).json()
            if state["state"] != "running":
                break
            time.sleep(0.1)
        assert state["state"] == "completed", state
        ranked = state["result"]["list"]
        assert ranked[0]["list"][0]["int"] == 2  # 450 Hz is subject 2

    def test_delete_unknown_tier_is_404(self, daemon):
        response = httpx.delete(url(daemon, "/v1/tiers/tier-404"))
        assert response.status_code == 404
        assert response.json()["code"] == "UnknownTier"

    def test_illegal_transition_is_409(self, daemon):
        node = httpx.post(url(daemon, "/v1/nodes"), json={
            "node_name": "api-n2", "address": "127.0.0.1:7102",
            "color": "#00ff00"}).json()
        response = httpx.post(url(daemon, "/v1/nodes/%s/stop" % node["node_id"]))
        assert response.status_code == 409
        assert response.json()["code"] == "IllegalTransition"

    def test_bad_body_is_400(self, daemon):
        response = httpx.post(url(daemon, "/v1/nodes"), json={
            "node_name": "x", "address": "nonsense", "color": "#0000ff"})
        assert response.status_code == 400
        assert response.json()["code"] == "BadAddress"

    def test_unknown_route_is_404(self, daemon):
        assert httpx.get(url(daemon, "/v1/quux")).status_code == 404

    def test_alloc_with_bind_to(self, daemon):
        node = httpx.post(url(daemon, "/v1/nodes"), json={
            "node_name": "api-n3", "address": "127.0.0.1:7103",
            "color": "#123abc"}).json()
        httpx.post(url(daemon, "/v1/nodes/%s/start" % node["node_id"]))
        dst_a = httpx.post(url(daemon, "/v1/tiers"), json={
            "node_id": node["node_id"], "kind": "DST"}).json()
        dst_b = httpx.post(url(daemon, "/v1/tiers"), json={
            "node_id": node["node_id"], "kind": "DST"}).json()
        dwt = httpx.post(url(daemon, "/v1/tiers"), json={
            "node_id": node["node_id"], "kind": "DWT",
            "bind_to": dst_b["tier_id"]}).json()
        topology = httpx.get(url(daemon, "/v1/topology")).json()
        assert topology["relations"]["tier_bindings"][dwt["tier_id"]] == dst_b["tier_id"]
        for tier_id in (dwt["tier_id"], dst_a["tier_id"], dst_b["tier_id"]):
            httpx.delete(url(daemon, "/v1/tiers/%s" % tier_id))

    def test_cancel_evaluation_via_api(self, daemon):
        accepted = httpx.post(url(daemon, "/v1/evaluations"), json={
            "source": {"kind": "sine", "freq": 600.0, "n": 1024},
            "timeout_s": 30.0})
        evaluation_id = accepted.json()["evaluation_id"]
        cancelled = httpx.delete(url(daemon, "/v1/evaluations/%s" % evaluation_id))
        assert cancelled.status_code == 200
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            state = httpx.get(url(daemon, "/v1/evaluations/%s" % evaluation_id)).json()
            if state["state"] != "running":
                break
            time.sleep(0.05)
        assert state["state"] in ("cancelled", "completed", "failed")

    def test_network_save_load_via_api(self, daemon, tmp_path):
        doc = httpx.get(url(daemon, "/v1/network")).json()
        assert {"instance", "nodes", "tiers", "edges"} <= set(doc)
        response = httpx.put(url(daemon, "/v1/network"), json=doc)
        assert response.status_code == 200

    def test_event_stream_delivers_in_order(self, daemon):
        seen = []
        ready = threading.Event()

        def consume():
            with httpx.stream("GET", url(daemon, "/v1/events"), timeout=10.0) as stream:
                ready.set()
                for line in stream.iter_lines():
                    if line.startswith("data: "):
                        seen.append(json.loads(line[6:]))
                        if len(seen) >= 3:
                            return

        thread = threading.Thread(target=consume, daemon=True)
        thread.start()
        assert ready.wait(5.0)
        time.sleep(0.2)  # let the subscription land before emitting
        for index in range(3):
            daemon.grid.emit("nodeRegistered", "stream-test-%d" % index)
        thread.join(timeout=10.0)
        subjects = [event["subject"] for event in seen
                    if event["subject"].startswith("stream-test")]
        assert subjects == ["stream-test-0", "stream-test-1", "stream-test-2"]


class TestCli:
    def test_unknown_subcommand_exits_1(self, capsys):
        assert cli.main(["warp"]) == 1

    def test_no_subcommand_exits_1(self):
        assert cli.main([]) == 1

    def test_serve_missing_config_exits_2(self, tmp_path):
        assert cli.main(["serve", "--config", str(tmp_path / "nope.config")]) == 2

    def test_serve_rejects_bad_extension(self, tmp_path):
        path = tmp_path / "x.cfg"
        path.write_text("a=1\n")
        assert cli.main(["serve", "--config", str(path)]) == 2

    def test_eval_against_daemon(self, daemon, capsys):
        host, port = daemon.address
        api = "http://%s:%d" % (host, port)
        code = cli.main(["eval", "run", "--sine", "200,8000,1024,0.01,77",
                         "--wait", "--api", api])
        assert code == 0
        out = capsys.readouterr().out
        assert '"state":"completed"' in out

    def test_sine_spec_parsing(self):
        assert cli.parse_sine("450") == {"kind": "sine", "freq": 450.0}
        assert cli.parse_sine("450,8000,2048,0.01,7") == {
            "kind": "sine", "freq": 450.0, "rate": 8000, "n": 2048,
            "noise": 0.01, "seed": 7}

    def test_node_tier_and_net_round_trip(self, daemon, tmp_path, capsys):
        host, port = daemon.address
        api = "http://%s:%d" % (host, port)
        assert cli.main(["node", "register", "--name", "cli-n1",
                         "--address", "127.0.0.1:7201", "--api", api]) == 0
        node_id = json.loads(capsys.readouterr().out)["node_id"]
        assert cli.main(["node", "start", "--id", node_id, "--api", api]) == 0
        capsys.readouterr()
        assert cli.main(["tier", "alloc", "--node", node_id, "--kind", "DST",
                         "--api", api]) == 0
        tier_id = json.loads(capsys.readouterr().out)["tier_id"]
        path = str(tmp_path / "grid.net")
        assert cli.main(["net", "save", path, "--api", api]) == 0
        assert cli.main(["net", "load", path, "--api", api]) == 0
        capsys.readouterr()
        assert cli.main(["tier", "dealloc", "--id", tier_id, "--api", api]) == 0
