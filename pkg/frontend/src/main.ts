/** Console wiring: panels, graph canvas, event stream, action plumbing. */

import { ApiClient } from "./api.js";
import { ConsoleController } from "./actions.js";
import { EventStream } from "./events.js";
import { GraphCanvas } from "./graph.js";
import { ConsoleModel } from "./viewmodel.js";
import { decodeRanked, type EvaluationInfo } from "./types.js";

const base = (window as any).EDGRID_API ?? `${location.protocol}//${location.host}`;
const api = new ApiClient(base);
const model = new ConsoleModel(1000);
const controller = new ConsoleController(api, model);

const el = (id: string) => document.getElementById(id)!;

const canvas = new GraphCanvas(el("graph"), {
  onSelect: (id) => model.select(id),
  onDragEdge: (tierId, toDstId) => {
    void controller.apply({ kind: "DragEdge", tierId, toDstId }).catch(() => undefined);
  },
});

function renderLog() {
  const list = el("log");
  list.replaceChildren();
  for (const entry of model.log.toArray().slice(-200)) {
    const row = document.createElement("div");
    row.className = "log-entry" + (entry.autonomic ? " autonomic" : "")
      + (entry.isError ? " error" : "");
    row.textContent = `${new Date(entry.at).toLocaleTimeString()}  ${entry.text}`;
    list.appendChild(row);
  }
  list.scrollTop = list.scrollHeight;
}

function renderSelection() {
  const panel = el("selection");
  panel.replaceChildren();
  const selected = model.view.vertices.find((v) => v.id === model.view.selection);
  if (!selected) {
    panel.textContent = "Nothing selected. Click a node or tier.";
    return;
  }
  const title = document.createElement("h3");
  title.textContent = selected.label;
  panel.appendChild(title);
  const buttons: Array<[string, () => Promise<unknown>]> = [];
  if (selected.kind === "node") {
    buttons.push(["Start", () => controller.apply({ kind: "StartNode", nodeId: selected.id })]);
    buttons.push(["Stop", () => controller.apply({ kind: "StopNode", nodeId: selected.id })]);
    buttons.push(["Kill", () => controller.apply({ kind: "KillNode", nodeId: selected.id })]);
    for (const tierKind of ["DST", "DGT", "DWT"] as const) {
      buttons.push([`+${tierKind}`, () => controller.apply(
        { kind: "AllocTier", nodeId: selected.id, tierKind })]);
    }
  } else {
    buttons.push(["Deallocate", () => controller.apply(
      { kind: "DeallocTier", tierId: selected.id })]);
  }
  for (const [label, run] of buttons) {
    const button = document.createElement("button");
    button.textContent = label;
    button.addEventListener("click", () => void run().catch(() => undefined));
    panel.appendChild(button);
  }
}

function renderStream() {
  const badge = el("stream-state");
  badge.textContent = model.streamState;
  badge.className = `stream-${model.streamState}`;
}

model.onChange(() => {
  canvas.render(model.view);
  renderLog();
  renderSelection();
  renderStream();
  el("banner").textContent = model.view.banner ?? "";
});

el("create-node").addEventListener("click", () => {
  const name = (el("node-name") as HTMLInputElement).value || "node";
  const address = (el("node-address") as HTMLInputElement).value || "127.0.0.1:7001";
  const color = (el("node-color") as HTMLInputElement).value || "#3366ff";
  void controller.apply({ kind: "CreateNode", name, address, color })
    .catch(() => undefined);
});

el("save-network").addEventListener("click", () => {
  void controller.apply({ kind: "SaveNetwork" }).then((doc) => {
    const blob = new Blob([JSON.stringify(doc)], { type: "application/json" });
    const anchor = document.createElement("a");
    anchor.href = URL.createObjectURL(blob);
    anchor.download = "grid.net";
    anchor.click();
  }).catch(() => undefined);
});

el("load-network").addEventListener("change", (event) => {
  const input = event.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  void file.text().then((text) =>
    controller.apply({ kind: "LoadNetwork", doc: JSON.parse(text) }))
    .catch(() => undefined);
  input.value = "";
});

async function pollEvaluation(evaluationId: string) {
  for (let i = 0; i < 600; i++) {
    const state: EvaluationInfo = await api.evaluation(evaluationId);
    if (state.state !== "running") {
      const ranked = decodeRanked(state.result);
      const summary = state.state === "completed"
        ? `ranked: ${ranked.map((r) => `#${r.subjectId}@${r.distance.toFixed(3)}`).join(" ")}`
        : state.error ?? state.state;
      el("eval-result").textContent = `${evaluationId}: ${state.state} — ${summary}`;
      return;
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
}

el("run-eval").addEventListener("click", () => {
  const freq = Number((el("eval-freq") as HTMLInputElement).value || "450");
  void controller.apply({
    kind: "StartEval",
    request: { source: { kind: "sine", freq, noise: 0.01, seed: 42 }, timeout_s: 60 },
  }).then((handle) => {
    const evaluation = handle as EvaluationInfo;
    el("eval-result").textContent = `${evaluation.evaluation_id}: running…`;
    void pollEvaluation(evaluation.evaluation_id);
  }).catch(() => undefined);
});

const stream = new EventStream(base, {
  onEvent: (event) => {
    model.appendEvent(event);
    // topology-changing events refresh the graph so the view converges
    if (/^(node|tier)/.test(event.name)) void controller.refresh();
  },
  onState: (state) => model.setStreamState(state),
});

void controller.refresh();
stream.start();
