/** Typed client for the manager daemon; every console mutation goes here. */

import type { EvaluationInfo, NodeInfo, TierInfo, TierKind, TopologySnapshot } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, readonly code: string, message: string) {
    super(message);
  }
}

export interface EvalRequest {
  source: { kind: "sine"; freq: number; rate?: number; n?: number; noise?: number; seed?: number }
        | { kind: "wav"; path: string };
  window_len?: number;
  poles?: number;
  silence_threshold?: number;
  context?: Record<string, number>;
  timeout_s?: number;
}

export class ApiClient {
  constructor(readonly base: string, private fetchFn: typeof fetch = fetch) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchFn(this.base + path, {
      method,
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    let tree: any = null;
    try {
      tree = text ? JSON.parse(text) : null;
    } catch {
      throw new ApiError(response.status, "BadResponse", text.slice(0, 200));
    }
    if (!response.ok) {
      throw new ApiError(response.status, tree?.code ?? "Error", tree?.message ?? text);
    }
    return tree as T;
  }

  topology(): Promise<TopologySnapshot> {
    return this.call("GET", "/v1/topology");
  }

  registerNode(name: string, address: string, color: string): Promise<NodeInfo> {
    return this.call("POST", "/v1/nodes", { node_name: name, address, color });
  }

  startNode(nodeId: string): Promise<NodeInfo> {
    return this.call("POST", `/v1/nodes/${nodeId}/start`);
  }

  stopNode(nodeId: string): Promise<NodeInfo> {
    return this.call("POST", `/v1/nodes/${nodeId}/stop`);
  }

  killNode(nodeId: string): Promise<unknown> {
    return this.call("POST", `/v1/nodes/${nodeId}/kill`);
  }

  allocTier(nodeId: string, kind: TierKind, config?: Record<string, string>,
            bindTo?: string): Promise<TierInfo> {
    const body: Record<string, unknown> = { node_id: nodeId, kind, config: config ?? {} };
    if (bindTo) body.bind_to = bindTo;
    return this.call("POST", "/v1/tiers", body);
  }

  deallocTier(tierId: string): Promise<unknown> {
    return this.call("DELETE", `/v1/tiers/${tierId}`);
  }

  startEvaluation(request: EvalRequest): Promise<EvaluationInfo> {
    return this.call("POST", "/v1/evaluations", request);
  }

  evaluation(evaluationId: string): Promise<EvaluationInfo> {
    return this.call("GET", `/v1/evaluations/${evaluationId}`);
  }

  stopEvaluation(evaluationId: string): Promise<EvaluationInfo> {
    return this.call("DELETE", `/v1/evaluations/${evaluationId}`);
  }

  saveNetwork(): Promise<unknown> {
    return this.call("GET", "/v1/network");
  }

  loadNetwork(doc: unknown): Promise<TopologySnapshot> {
    return this.call("PUT", "/v1/network", doc);
  }
}
