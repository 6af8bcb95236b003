/**
 * Renderer-independent editor workflow: session lifecycle, edits with
 * progress tracking, heatmap bookkeeping, undo, variations, swaps. The
 * three.js layer subscribes to `onGeometry`/`onHeatmap` and draws; tests
 * drive this class headlessly against a live service.
 */

import { EditorClient, EditRequest } from "./api.js";
import { displacementMagnitudes, heatmapViolations } from "./heatmap.js";
import { watchJob, WebSocketCtor, JobProgress } from "./progress.js";
import { EditorState } from "./state.js";
import { MeshTopology } from "./topology.js";

export interface EditOutcome {
  jobId: string;
  mask: number[];
  progress: JobProgress;
  displacement: Float64Array;
  /** vertices outside mask+moved-anchors with nonzero displacement (must be empty) */
  violations: number[];
}

export class EditorApp {
  readonly state = new EditorState();
  topology: MeshTopology | null = null;
  geometry: Float32Array | null = null;
  heatmap: Float64Array | null = null;

  onGeometry: ((g: Float32Array) => void) | null = null;
  onHeatmap: ((h: Float64Array) => void) | null = null;
  onError: ((message: string) => void) | null = null;

  constructor(
    private readonly client: EditorClient,
    private readonly wsCtor: WebSocketCtor,
  ) {}

  async openSession(mesh?: Float32Array): Promise<string> {
    const doc = await this.client.createSession(mesh);
    this.state.reset(doc.session_id, doc.vertex_count);
    this.topology = new MeshTopology(doc.vertex_count, doc.faces.flat());
    await this.refreshGeometry();
    this.heatmap = null;
    return doc.session_id;
  }

  private get sessionId(): string {
    if (!this.state.sessionId) throw new Error("no open session");
    return this.state.sessionId;
  }

  async refreshGeometry(): Promise<Float32Array> {
    this.geometry = await this.client.getMesh(this.sessionId);
    this.onGeometry?.(this.geometry);
    return this.geometry;
  }

  /** Instant client-side region preview around the current anchors. */
  brushPreview(hops: number): Set<number> {
    if (!this.topology) throw new Error("no topology yet");
    return this.topology.hopBrush(this.state.anchors.keys(), hops);
  }

  private async runJob(
    submit: () => Promise<{ job_id: string; mask: number[] }>,
    extraAllowed: Iterable<number> = [],
  ): Promise<EditOutcome> {
    const before = this.geometry;
    if (!before) throw new Error("no geometry yet");
    this.state.startJob();
    try {
      const accepted = await submit();
      const progress = await watchJob(
        this.client.progressUrl(this.sessionId),
        accepted.job_id,
        this.wsCtor,
        (m) => {
          if (m.kind === "progress") this.state.updateProgress(m.event.fraction_done);
          else this.state.updateProgress(1);
        },
      );
      if (progress.error) throw new Error(progress.error);
      const after = await this.refreshGeometry();
      const displacement = displacementMagnitudes(before, after);
      this.heatmap = displacement;
      this.onHeatmap?.(displacement);
      const allowed = [...this.state.movedAnchors(), ...extraAllowed];
      return {
        jobId: accepted.job_id,
        mask: accepted.mask,
        progress,
        displacement,
        violations: heatmapViolations(displacement, accepted.mask, allowed),
      };
    } catch (err) {
      this.onError?.(err instanceof Error ? err.message : String(err));
      this.geometry = before; // roll back the local view
      throw err;
    } finally {
      this.state.finishJob();
    }
  }

  /** Serialize the current anchors/region and run one edit job. */
  async requestEdit(opts: { hops?: number; seed?: number } = {}): Promise<EditOutcome> {
    if (this.state.movedAnchors().length === 0) {
      throw new Error("drag at least one anchor before requesting an edit");
    }
    const req: EditRequest = { anchors: this.state.anchorSpecs(), seed: opts.seed ?? 0 };
    const explicit = this.state.regionVertices();
    req.region = explicit.length > 0 ? { vertices: explicit } : { hops: opts.hops ?? 3 };
    return this.runJob(() => this.client.edit(this.sessionId, req));
  }

  async sampleVariations(
    n: number,
    opts: { hops?: number; seed?: number } = {},
  ): Promise<Float32Array[]> {
    const req: EditRequest & { n: number } = {
      anchors: this.state.anchorSpecs(),
      n,
      seed: opts.seed ?? 0,
    };
    const explicit = this.state.regionVertices();
    req.region = explicit.length > 0 ? { vertices: explicit } : { hops: opts.hops ?? 3 };
    await this.runJob(() => this.client.sampleRegion(this.sessionId, req));
    const out: Float32Array[] = [];
    for (let k = 0; k < n; k++) out.push(await this.client.getVariation(this.sessionId, k));
    return out;
  }

  async selectVariation(k: number): Promise<void> {
    await this.client.selectVariation(this.sessionId, k);
    await this.refreshGeometry();
  }

  async swapRegion(
    donor: Float32Array,
    region: number[],
    seed = 0,
  ): Promise<EditOutcome> {
    // the service anchors the region interior to the donor mesh, so the
    // whole requested region may legitimately move
    return this.runJob(
      () =>
        this.client.swap(this.sessionId, {
          anchors: [],
          region: { vertices: region },
          mesh_b: donor,
          seed,
        }),
      region,
    );
  }

  async undo(): Promise<Float32Array> {
    await this.client.undo(this.sessionId);
    this.heatmap = null;
    return this.refreshGeometry();
  }
}
