/** SVG rendering of the topology graph, with drag-to-rebind on tiers. */

import type { GraphViewModel, Vertex } from "./viewmodel.js";

const SVG_NS = "http://www.w3.org/2000/svg";

const STATUS_STROKE: Record<string, string> = {
  Registered: "#8a8f98",
  Started: "#2da44e",
  Stopped: "#b08800",
  Suspected: "#bc4c00",
  Dead: "#cf222e",
};

export interface GraphCallbacks {
  onSelect: (id: string | null) => void;
  onDragEdge: (tierId: string, toDstId: string) => void;
}

export class GraphCanvas {
  private svg: SVGSVGElement;
  private dragFrom: Vertex | null = null;
  private dragLine: SVGLineElement | null = null;
  private lastModel: GraphViewModel | null = null;

  constructor(private container: HTMLElement, private callbacks: GraphCallbacks) {
    this.svg = document.createElementNS(SVG_NS, "svg");
    this.svg.setAttribute("width", "100%");
    this.svg.setAttribute("height", "100%");
    this.svg.addEventListener("click", () => this.callbacks.onSelect(null));
    container.appendChild(this.svg);
  }

  render(model: GraphViewModel) {
    this.lastModel = model;
    this.svg.replaceChildren();
    for (const edge of model.edges) {
      const from = model.vertices.find((v) => v.id === edge.from);
      const to = model.vertices.find((v) => v.id === edge.to);
      if (!from || !to) continue;
      const line = document.createElementNS(SVG_NS, "line");
      line.setAttribute("x1", String(from.x));
      line.setAttribute("y1", String(from.y));
      line.setAttribute("x2", String(to.x));
      line.setAttribute("y2", String(to.y));
      line.setAttribute("stroke", edge.kind === "binding" ? "#5a87d0" : "#c4c9cf");
      line.setAttribute("stroke-width", edge.kind === "binding" ? "2.5" : "1.5");
      if (edge.kind === "binding") line.setAttribute("stroke-dasharray", "6 3");
      this.svg.appendChild(line);
    }
    for (const vertex of model.vertices) {
      this.svg.appendChild(this.renderVertex(vertex, model));
    }
  }

  private renderVertex(vertex: Vertex, model: GraphViewModel): SVGGElement {
    const group = document.createElementNS(SVG_NS, "g");
    group.setAttribute("transform", `translate(${vertex.x},${vertex.y})`);
    group.setAttribute("data-id", vertex.id);
    group.style.cursor = "pointer";
    if (vertex.optimistic) group.setAttribute("opacity", "0.55");

    let shape: SVGElement;
    if (vertex.kind === "node") {
      shape = document.createElementNS(SVG_NS, "circle");
      shape.setAttribute("r", "26");
      shape.setAttribute("fill", vertex.color);
      shape.setAttribute("stroke", STATUS_STROKE[vertex.status ?? "Registered"]);
      shape.setAttribute("stroke-width", model.selection === vertex.id ? "5" : "3");
    } else {
      shape = document.createElementNS(SVG_NS, "rect");
      shape.setAttribute("x", "-42");
      shape.setAttribute("y", "-16");
      shape.setAttribute("width", "84");
      shape.setAttribute("height", "32");
      shape.setAttribute("rx", "6");
      shape.setAttribute("fill", vertex.tierKind === "DST" ? "#eef3fb" : "#f6f8fa");
      shape.setAttribute("stroke",
        model.selection === vertex.id ? "#0969da" : "#8a8f98");
      shape.setAttribute("stroke-width", model.selection === vertex.id ? "3" : "1.5");
    }
    group.appendChild(shape);

    const text = document.createElementNS(SVG_NS, "text");
    text.textContent = vertex.kind === "node"
      ? vertex.label.split(" ")[0] : vertex.label;
    text.setAttribute("text-anchor", "middle");
    text.setAttribute("y", vertex.kind === "node" ? "42" : "5");
    text.setAttribute("font-size", "12");
    group.appendChild(text);

    if (vertex.kind === "node" && vertex.status) {
      const badge = document.createElementNS(SVG_NS, "text");
      badge.textContent = vertex.status;
      badge.setAttribute("text-anchor", "middle");
      badge.setAttribute("y", "-34");
      badge.setAttribute("font-size", "11");
      badge.setAttribute("fill", STATUS_STROKE[vertex.status]);
      group.appendChild(badge);
    }

    group.addEventListener("click", (event) => {
      event.stopPropagation();
      this.callbacks.onSelect(vertex.id);
    });
    if (vertex.kind === "tier" && (vertex.tierKind === "DGT" || vertex.tierKind === "DWT")) {
      group.addEventListener("mousedown", (event) => {
        event.preventDefault();
        this.beginDrag(vertex);
      });
    }
    if (vertex.kind === "tier" && vertex.tierKind === "DST") {
      group.addEventListener("mouseup", () => {
        if (this.dragFrom && this.dragFrom.id !== vertex.id) {
          this.callbacks.onDragEdge(this.dragFrom.id, vertex.id);
        }
        this.endDrag();
      });
    }
    return group;
  }

  private beginDrag(vertex: Vertex) {
    this.dragFrom = vertex;
    this.dragLine = document.createElementNS(SVG_NS, "line");
    this.dragLine.setAttribute("x1", String(vertex.x));
    this.dragLine.setAttribute("y1", String(vertex.y));
    this.dragLine.setAttribute("x2", String(vertex.x));
    this.dragLine.setAttribute("y2", String(vertex.y));
    this.dragLine.setAttribute("stroke", "#0969da");
    this.dragLine.setAttribute("stroke-dasharray", "4 3");
    this.svg.appendChild(this.dragLine);
    const move = (event: MouseEvent) => {
      const rect = this.svg.getBoundingClientRect();
      this.dragLine?.setAttribute("x2", String(event.clientX - rect.left));
      this.dragLine?.setAttribute("y2", String(event.clientY - rect.top));
    };
    const up = () => {
      window.removeEventListener("mousemove", move);
      window.removeEventListener("mouseup", up);
      // a mouseup over a DST fires its handler first; then clean up
      setTimeout(() => this.endDrag(), 0);
    };
    window.addEventListener("mousemove", move);
    window.addEventListener("mouseup", up);
  }

  private endDrag() {
    this.dragFrom = null;
    if (this.dragLine) {
      this.dragLine.remove();
      this.dragLine = null;
    }
  }
}
