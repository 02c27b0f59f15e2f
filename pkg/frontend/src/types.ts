/** Shapes of the daemon's API trees (topology, events, evaluations). */

export type NodeStatus = "Registered" | "Started" | "Stopped" | "Suspected" | "Dead";
export type TierKind = "DGT" | "DST" | "DWT" | "GMT";

export interface NodeInfo {
  node_id: string;
  node_name: string;
  address: string;
  color: string;
  registered_at: number;
  status: NodeStatus;
}

export interface TierInfo {
  tier_id: string;
  kind: TierKind;
  node_id: string;
  instance_count: number;
  config: Record<string, string>;
  metrics?: Record<string, number>;
  address?: string;
}

export interface TopologySnapshot {
  instance: { instance_id: string; instance_name: string };
  nodes: NodeInfo[];
  tiers: TierInfo[];
  relations: {
    node_system: Record<string, string>;
    tier_bindings: Record<string, string>;
  };
  links: Record<string, string>;
  metrics: Record<string, number>;
  evaluations: EvaluationInfo[];
}

export interface EvaluationInfo {
  evaluation_id: string;
  state: "running" | "completed" | "failed" | "cancelled";
  geer_id: string;
  started_at: number;
  finished_at?: number;
  result?: ValueTree;
  error?: string;
}

/** The daemon's tagged value trees; the console only decodes ranked results. */
export type ValueTree =
  | { int: number }
  | { float: number }
  | { text: string }
  | { bytes: string }
  | { vec: number[] }
  | { list: ValueTree[] };

export interface GridEvent {
  name: string;
  subject: string;
  at: number;
  attributes: Record<string, unknown>;
}

export interface RankedSubject {
  subjectId: number;
  distance: number;
}

/** Decode a classification result value into its ranked subject list. */
export function decodeRanked(tree: ValueTree | undefined): RankedSubject[] {
  if (!tree || !("list" in tree)) return [];
  const ranked: RankedSubject[] = [];
  for (const row of tree.list) {
    if (!("list" in row) || row.list.length < 2) continue;
    const id = row.list[0];
    const dist = row.list[1];
    if ("int" in id && "float" in dist) {
      ranked.push({ subjectId: id.int, distance: dist.float });
    }
  }
  return ranked;
}

/** Autonomic happenings get visual emphasis in the log view. */
export const AUTONOMIC_EVENTS = new Set([
  "nodeDown", "nodeReplaced", "nodeReplacementFailed",
  "lowPerformanceDetected", "performanceNormalized", "performanceNormFailed",
  "recoveryStarted", "recoverySucceeded", "recoveryFailed",
  "enteringClassificationStage", "optimizationSucceeded", "optimizationNotSucceeded",
  "protocolSwitched", "publicMessageInsecure", "tierReallocated",
]);
