"""Network documents: save, load, round-trip fixed point, integrity."""

import pytest

from edgrid import netdoc
from edgrid.config import Configuration
from edgrid.runtime import GridRuntime
from edgrid.tiers import NodeStatus, TierKind


def build_grid():
    grid = GridRuntime()
    n1 = grid.register_node("doc-n1", "127.0.0.1:7001", "#ff0000")
    n2 = grid.register_node("doc-n2", "127.0.0.1:7002", "#00ff00")
    grid.node_lifecycle(n1.node_id, "Start")
    grid.node_lifecycle(n2.node_id, "Start")
    grid.allocate_tier(n1.node_id, TierKind.DST)
    grid.allocate_tier(n1.node_id, TierKind.DGT)
    grid.allocate_tier(n2.node_id, TierKind.DWT,
                       config=Configuration({"tier.instances": "2"}))
    return grid


class TestSaveLoad:
    def test_save_fresh_daemon_is_empty(self):
        grid = GridRuntime()
        doc = netdoc.save_network(grid)
        assert doc["nodes"] == [] and doc["tiers"] == [] and doc["edges"] == []

    def test_roundtrip_fixed_point(self):
        grid = build_grid()
        doc_a = netdoc.save_network(grid)
        grid.shutdown()
        fresh = GridRuntime()
        netdoc.load_network(fresh, doc_a)
        doc_b = netdoc.save_network(fresh)
        fresh.shutdown()
        assert doc_a == doc_b

    def test_load_preserves_edges(self):
        grid = build_grid()
        doc = netdoc.save_network(grid)
        grid.shutdown()
        fresh = GridRuntime()
        netdoc.load_network(fresh, doc)
        bindings = fresh.info.dgt_dwt_registration
        for tier_id, dst_id in (tuple(edge) for edge in doc["edges"]):
            assert bindings[tier_id] == dst_id
        fresh.audit()
        fresh.shutdown()

    def test_load_starts_hosting_nodes_only(self):
        grid = build_grid()
        bare = grid.register_node("doc-n3", "127.0.0.1:7003", "#0000ff")
        doc = netdoc.save_network(grid)
        grid.shutdown()
        fresh = GridRuntime()
        netdoc.load_network(fresh, doc)
        statuses = {n.node_name: n.status for n in fresh.info.node_registrations}
        assert statuses["doc-n1"] is NodeStatus.STARTED
        assert statuses["doc-n3"] is NodeStatus.REGISTERED
        fresh.shutdown()

    def test_dangling_tier_reference(self):
        doc = {
            "instance": {"instance_id": "instance-1", "instance_name": "grid"},
            "nodes": [],
            "tiers": [{"tier_id": "dwt-1", "kind": "DWT", "node_id": "ghost",
                       "instance_count": 1, "config": {}}],
            "edges": [],
        }
        with pytest.raises(netdoc.IntegrityError):
            netdoc.load_network(GridRuntime(), doc)

    def test_dangling_edge_reference(self):
        doc = {
            "instance": {"instance_id": "instance-1", "instance_name": "grid"},
            "nodes": [],
            "tiers": [],
            "edges": [["dwt-1", "dst-1"]],
        }
        with pytest.raises(netdoc.IntegrityError):
            netdoc.validate_document(doc)

    def test_document_encoding_roundtrip(self):
        grid = build_grid()
        doc = netdoc.save_network(grid)
        grid.shutdown()
        assert netdoc.decode_document(netdoc.encode_document(doc)) == doc
