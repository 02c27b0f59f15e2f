/** User actions: each maps to exactly one API request family, applies an
 * optimistic update, and reverts (with a log entry) if the server says no.
 */

import { ApiClient, ApiError, EvalRequest } from "./api.js";
import { ConsoleModel } from "./viewmodel.js";
import type { TierKind } from "./types.js";

export type UserAction =
  | { kind: "CreateNode"; name: string; address: string; color: string }
  | { kind: "RegisterNode"; name: string; address: string; color: string }
  | { kind: "StartNode"; nodeId: string }
  | { kind: "StopNode"; nodeId: string }
  | { kind: "KillNode"; nodeId: string }
  | { kind: "AllocTier"; nodeId: string; tierKind: TierKind }
  | { kind: "DeallocTier"; tierId: string }
  | { kind: "StartEval"; request: EvalRequest }
  | { kind: "StopEval"; evaluationId: string }
  | { kind: "SaveNetwork" }
  | { kind: "LoadNetwork"; doc: unknown }
  | { kind: "DragEdge"; tierId: string; toDstId: string };

export class BlockedAction extends Error {}

export class ConsoleController {
  constructor(readonly api: ApiClient, readonly model: ConsoleModel) {}

  async refresh(): Promise<void> {
    this.model.acceptSnapshot(await this.api.topology());
  }

  private nodeStatus(nodeId: string): string | undefined {
    return this.model.view.vertices.find(
      (v) => v.id === nodeId && v.kind === "node")?.status;
  }

  /** Client-side preconditions; blocked actions never reach the API. */
  private validate(action: UserAction) {
    if (action.kind === "AllocTier" && this.nodeStatus(action.nodeId) !== "Started") {
      throw new BlockedAction(
        `cannot allocate a ${action.tierKind} on a node that is not Started`);
    }
    if (action.kind === "StartNode" && this.nodeStatus(action.nodeId) === "Dead") {
      throw new BlockedAction("a dead node cannot be started");
    }
    if (action.kind === "StopNode" && this.nodeStatus(action.nodeId) !== "Started") {
      throw new BlockedAction("only a started node can be stopped");
    }
    if (action.kind === "DragEdge") {
      const target = this.model.view.vertices.find((v) => v.id === action.toDstId);
      if (target?.tierKind !== "DST") {
        throw new BlockedAction("tiers can only be re-bound to a store tier");
      }
      const dragged = this.model.view.vertices.find((v) => v.id === action.tierId);
      if (dragged?.tierKind !== "DGT" && dragged?.tierKind !== "DWT") {
        throw new BlockedAction("only generator/worker tiers can be re-bound");
      }
    }
  }

  async apply(action: UserAction): Promise<unknown> {
    try {
      this.validate(action);
    } catch (error) {
      this.model.appendError(`blocked: ${(error as Error).message}`);
      throw error;
    }
    try {
      const result = await this.perform(action);
      await this.refresh();
      return result;
    } catch (error) {
      this.model.revert();
      const detail = error instanceof ApiError
        ? `${error.code}: ${error.message}` : String(error);
      this.model.appendError(`${action.kind} failed — ${detail}`);
      throw error;
    }
  }

  private async perform(action: UserAction): Promise<unknown> {
    switch (action.kind) {
      case "CreateNode":
      case "RegisterNode":
        return this.api.registerNode(action.name, action.address, action.color);
      case "StartNode":
        this.model.optimisticNodeStatus(action.nodeId, "Started");
        return this.api.startNode(action.nodeId);
      case "StopNode":
        this.model.optimisticNodeStatus(action.nodeId, "Stopped");
        return this.api.stopNode(action.nodeId);
      case "KillNode":
        return this.api.killNode(action.nodeId);
      case "AllocTier":
        this.model.optimisticTier(action.nodeId, action.tierKind);
        return this.api.allocTier(action.nodeId, action.tierKind);
      case "DeallocTier":
        return this.api.deallocTier(action.tierId);
      case "StartEval":
        return this.api.startEvaluation(action.request);
      case "StopEval":
        return this.api.stopEvaluation(action.evaluationId);
      case "SaveNetwork":
        return this.api.saveNetwork();
      case "LoadNetwork":
        return this.api.loadNetwork(action.doc);
      case "DragEdge": {
        // re-binding is expressed as dealloc + alloc onto the chosen store
        const dragged = this.model.view.vertices.find((v) => v.id === action.tierId);
        if (!dragged?.nodeId || !dragged.tierKind) {
          throw new BlockedAction("unknown tier");
        }
        await this.api.deallocTier(action.tierId);
        return this.api.allocTier(dragged.nodeId, dragged.tierKind, {}, action.toDstId);
      }
    }
  }
}
