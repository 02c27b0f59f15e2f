/** The graph view model: what the canvas and panels render.
 *
 * The model mirrors the last server snapshot plus optimistic local edits,
 * each flagged until the server confirms them; a fresh snapshot always
 * wins, so after quiescence the view equals the server's state.
 */

import type { GridEvent, NodeStatus, TierKind, TopologySnapshot } from "./types.js";
import { AUTONOMIC_EVENTS } from "./types.js";
import { RingBuffer } from "./events.js";

export interface Vertex {
  id: string;
  kind: "node" | "tier";
  label: string;
  color: string;
  status?: NodeStatus;
  tierKind?: TierKind;
  nodeId?: string;
  x: number;
  y: number;
  optimistic: boolean;
}

export interface EdgeView {
  from: string;
  to: string;
  kind: "hosting" | "binding";
}

export interface LogEntry {
  at: number;
  text: string;
  autonomic: boolean;
  isError: boolean;
}

export interface GraphViewModel {
  vertices: Vertex[];
  edges: EdgeView[];
  selection: string | null;
  banner: string | null;
}

const NODE_SPACING_X = 230;
const NODE_Y = 70;
const TIER_Y0 = 170;
const TIER_SPACING_Y = 62;

/** Pure projection of a topology snapshot onto the canvas. */
export function renderTopology(snapshot: TopologySnapshot,
                               selection: string | null = null): GraphViewModel {
  try {
    const vertices: Vertex[] = [];
    const edges: EdgeView[] = [];
    const nodeX = new Map<string, number>();
    snapshot.nodes.forEach((node, index) => {
      const x = 130 + index * NODE_SPACING_X;
      nodeX.set(node.node_id, x);
      vertices.push({
        id: node.node_id, kind: "node",
        label: `${node.node_name} (${node.node_id})`,
        color: node.color, status: node.status,
        x, y: NODE_Y, optimistic: false,
      });
    });
    const perNode = new Map<string, number>();
    for (const tier of snapshot.tiers) {
      const slot = perNode.get(tier.node_id) ?? 0;
      perNode.set(tier.node_id, slot + 1);
      vertices.push({
        id: tier.tier_id, kind: "tier",
        label: tier.tier_id, color: "#d7dbe0",
        tierKind: tier.kind, nodeId: tier.node_id,
        x: nodeX.get(tier.node_id) ?? 130,
        y: TIER_Y0 + slot * TIER_SPACING_Y,
        optimistic: false,
      });
      edges.push({ from: tier.node_id, to: tier.tier_id, kind: "hosting" });
    }
    const tierIds = new Set(snapshot.tiers.map((t) => t.tier_id));
    for (const [tierId, dstId] of Object.entries(snapshot.relations.tier_bindings)) {
      if (tierIds.has(tierId) && tierIds.has(dstId)) {
        edges.push({ from: tierId, to: dstId, kind: "binding" });
      }
    }
    const known = new Set(vertices.map((v) => v.id));
    return {
      vertices, edges,
      selection: selection && known.has(selection) ? selection : null,
      banner: null,
    };
  } catch (error) {
    // a malformed snapshot degrades to an error banner, never a crash
    return { vertices: [], edges: [], selection: null,
             banner: `malformed topology snapshot: ${String(error)}` };
  }
}

export function describeEvent(event: GridEvent): LogEntry {
  const attrs = Object.entries(event.attributes ?? {})
    .map(([key, value]) => `${key}=${String(value)}`).join(" ");
  return {
    at: event.at,
    text: `${event.name} ${event.subject}${attrs ? " " + attrs : ""}`,
    autonomic: AUTONOMIC_EVENTS.has(event.name),
    isError: event.name.endsWith("Failed") || event.name === "publicMessageInsecure",
  };
}

/** Mutable console state: snapshot + optimistic overlay + the log ring. */
export class ConsoleModel {
  snapshot: TopologySnapshot | null = null;
  view: GraphViewModel = { vertices: [], edges: [], selection: null, banner: null };
  log: RingBuffer<LogEntry>;
  streamState = "connecting";
  selection: string | null = null;
  private listeners: Array<() => void> = [];

  constructor(logCapacity = 1000) {
    this.log = new RingBuffer<LogEntry>(logCapacity);
  }

  onChange(listener: () => void) {
    this.listeners.push(listener);
  }

  private notify() {
    for (const listener of this.listeners) listener();
  }

  /** Server state replaces any optimistic leftovers: convergence rule. */
  acceptSnapshot(snapshot: TopologySnapshot) {
    this.snapshot = snapshot;
    this.view = renderTopology(snapshot, this.selection);
    this.notify();
  }

  select(id: string | null) {
    this.selection = id;
    this.view = { ...this.view, selection: id };
    this.notify();
  }

  appendEvent(event: GridEvent) {
    this.log.push(describeEvent(event));
    this.notify();
  }

  appendError(text: string) {
    this.log.push({ at: Date.now(), text, autonomic: false, isError: true });
    this.notify();
  }

  setStreamState(state: string) {
    this.streamState = state;
    this.notify();
  }

  /** Optimistic overlay: mark a node's expected status until confirmed. */
  optimisticNodeStatus(nodeId: string, status: NodeStatus) {
    this.view = {
      ...this.view,
      vertices: this.view.vertices.map((vertex) =>
        vertex.id === nodeId && vertex.kind === "node"
          ? { ...vertex, status, optimistic: true }
          : vertex),
    };
    this.notify();
  }

  /** Optimistic overlay: a tier being created on a node. */
  optimisticTier(nodeId: string, kind: TierKind): string {
    const phantomId = `pending-${kind.toLowerCase()}-${Date.now()}`;
    const siblings = this.view.vertices.filter(
      (v) => v.kind === "tier" && v.nodeId === nodeId).length;
    const host = this.view.vertices.find((v) => v.id === nodeId);
    this.view = {
      ...this.view,
      vertices: [...this.view.vertices, {
        id: phantomId, kind: "tier", label: `${kind} …`, color: "#d7dbe0",
        tierKind: kind, nodeId,
        x: host?.x ?? 130, y: TIER_Y0 + siblings * TIER_SPACING_Y,
        optimistic: true,
      }],
      edges: [...this.view.edges, { from: nodeId, to: phantomId, kind: "hosting" }],
    };
    this.notify();
    return phantomId;
  }

  /** Revert all optimistic state back to the last confirmed snapshot. */
  revert() {
    if (this.snapshot) {
      this.view = renderTopology(this.snapshot, this.selection);
    }
    this.notify();
  }

  hasPhantoms(): boolean {
    return this.view.vertices.some((vertex) => vertex.optimistic);
  }
}
