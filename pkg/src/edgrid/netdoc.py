"""Save/load of pre-configured grid networks.

A network document captures instance, nodes (minus runtime status), tiers
and their connectivity edges as a canonical tree; loading one into a fresh
manager reproduces an equivalent topology, and save -> load -> save is a
fixed point.
"""

from __future__ import annotations

from typing import Dict

from . import canon
from .config import Configuration
from .tiers import TierKind


class IntegrityError(ValueError):
    """The document references nodes or tiers it does not define."""


def save_network(grid) -> dict:
    """Serialize the grid's current topology as a document tree."""
    snapshot = grid.gmt_snapshot()
    nodes = [{"node_id": n["node_id"], "node_name": n["node_name"],
              "address": n["address"], "color": n["color"]}
             for n in snapshot["nodes"]]
    tiers = [{"tier_id": t["tier_id"], "kind": t["kind"], "node_id": t["node_id"],
              "instance_count": t["instance_count"], "config": t["config"]}
             for t in snapshot["tiers"]]
    edges = sorted([tier_id, dst_id] for tier_id, dst_id
                   in snapshot["relations"]["tier_bindings"].items())
    return {
        "instance": dict(snapshot["instance"]),
        "nodes": nodes,
        "tiers": tiers,
        "edges": edges,
    }


def validate_document(doc: dict):
    if not isinstance(doc, dict) or not {"instance", "nodes", "tiers", "edges"} <= set(doc):
        raise IntegrityError("document must carry instance, nodes, tiers, edges")
    node_ids = set()
    for node in doc["nodes"]:
        if node["node_id"] in node_ids:
            raise IntegrityError("duplicate node id %r" % node["node_id"])
        node_ids.add(node["node_id"])
    tier_ids = set()
    for tier in doc["tiers"]:
        if tier["tier_id"] in tier_ids:
            raise IntegrityError("duplicate tier id %r" % tier["tier_id"])
        tier_ids.add(tier["tier_id"])
        if tier["node_id"] not in node_ids:
            raise IntegrityError("tier %s references missing node %s"
                                 % (tier["tier_id"], tier["node_id"]))
        TierKind(tier["kind"])
    for edge in doc["edges"]:
        if len(edge) != 2 or edge[0] not in tier_ids or edge[1] not in tier_ids:
            raise IntegrityError("edge %r references missing tiers" % (edge,))


def load_network(grid, doc: dict) -> dict:
    """Register the document's nodes and tiers in document order.

    Nodes carrying tiers are started (allocation needs a started node);
    bare nodes stay Registered. Returns the resulting topology snapshot.
    """
    validate_document(doc)
    bindings: Dict[str, str] = {edge[0]: edge[1] for edge in doc["edges"]}
    hosting = {tier["node_id"] for tier in doc["tiers"]}
    for node in doc["nodes"]:
        grid.register_node(node["node_name"], node["address"], node["color"],
                           node_id=node["node_id"])
        if node["node_id"] in hosting:
            grid.node_lifecycle(node["node_id"], "Start")
    ordered = sorted(doc["tiers"], key=lambda t: 0 if t["kind"] == "DST" else 1)
    for tier in ordered:
        existing = grid.info.tier(tier["tier_id"])
        if existing is not None:
            # re-loading a document over itself is a no-op per tier
            if (existing.kind.value, existing.node_id) != (tier["kind"], tier["node_id"]):
                raise IntegrityError("tier id %s already exists with a different "
                                     "shape" % tier["tier_id"])
            continue
        config = Configuration(tier["config"])
        if config.get_int("tier.instances", 1) != tier["instance_count"]:
            config.set("tier.instances", str(tier["instance_count"]))
        grid.allocate_tier(tier["node_id"], TierKind(tier["kind"]), config=config,
                           tier_id=tier["tier_id"], bind_to=bindings.get(tier["tier_id"]))
    return grid.gmt_snapshot()


def encode_document(doc: dict) -> bytes:
    return canon.text_encode(doc)


def decode_document(data: bytes) -> dict:
    doc = canon.decode_any(data)
    validate_document(doc)
    return doc
