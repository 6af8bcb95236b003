/**
 * Editor state: selection, anchor handles, view settings, job progress.
 * The store never mutates geometry on its own - authoritative vertex data
 * always comes back from the service; anchor targets here are previews
 * until an edit round-trips.
 */

import type { Vec3T } from "./api.js";

export type Tool = "select" | "anchor" | "brush";

export interface ViewSettings {
  heatmapEnabled: boolean;
  heatmapRangeMm: number | null; // null = auto (95th percentile)
}

export class EditorState {
  sessionId: string | null = null;
  vertexCount = 0;
  selection = new Set<number>();
  anchors = new Map<number, Vec3T | null>(); // null target = pinned in place
  view: ViewSettings = { heatmapEnabled: true, heatmapRangeMm: null };
  progress: number | null = null;
  busy = false;

  reset(sessionId: string, vertexCount: number): void {
    this.sessionId = sessionId;
    this.vertexCount = vertexCount;
    this.selection.clear();
    this.anchors.clear();
    this.progress = null;
    this.busy = false;
  }

  private checkVertex(v: number): void {
    if (!Number.isInteger(v) || v < 0 || v >= this.vertexCount) {
      throw new Error(`vertex ${v} out of range`);
    }
  }

  select(v: number): void {
    this.checkVertex(v);
    this.selection.add(v);
  }

  deselect(v: number): void {
    this.selection.delete(v);
  }

  /** Anchors come from picked or selected vertices; selection implied. */
  addAnchor(v: number): void {
    this.checkVertex(v);
    this.selection.add(v);
    if (!this.anchors.has(v)) this.anchors.set(v, null);
  }

  dragAnchor(v: number, target: Vec3T): void {
    if (!this.anchors.has(v)) throw new Error(`vertex ${v} is not an anchor`);
    if (!target.every(Number.isFinite)) throw new Error("anchor target must be finite");
    this.anchors.set(v, target);
  }

  removeAnchor(v: number): void {
    this.anchors.delete(v);
  }

  setHeatmapRange(mm: number | null): void {
    if (mm != null && mm < 0) throw new Error("heatmap range must be >= 0");
    this.view.heatmapRangeMm = mm;
  }

  /** Region for the next edit: explicit selection minus the anchors. */
  regionVertices(): number[] {
    return [...this.selection].filter((v) => !this.anchors.has(v)).sort((a, b) => a - b);
  }

  movedAnchors(): number[] {
    return [...this.anchors.entries()].filter(([, t]) => t !== null).map(([v]) => v);
  }

  anchorSpecs(): Array<{ vertex: number; target?: Vec3T }> {
    return [...this.anchors.entries()].map(([vertex, target]) =>
      target ? { vertex, target } : { vertex },
    );
  }

  startJob(): void {
    if (this.busy) throw new Error("a job is already pending");
    this.busy = true;
    this.progress = 0;
  }

  updateProgress(fraction: number): void {
    if (!this.busy) return;
    this.progress = fraction;
  }

  finishJob(): void {
    this.busy = false;
    this.progress = null;
  }
}
