/**
 * HTTP client for the edit service. Every JSON payload is schema-checked
 * with zod before use; a malformed payload raises instead of rendering
 * garbage. Mesh geometry travels as raw little-endian float32 arrays.
 */

import { z } from "zod";

export const Vec3 = z.tuple([z.number(), z.number(), z.number()]);
export type Vec3T = z.infer<typeof Vec3>;

export const SessionCreateResponse = z.object({
  session_id: z.string(),
  vertex_count: z.number().int().min(3),
  faces: z.array(z.tuple([z.number().int(), z.number().int(), z.number().int()])),
});

export const JobAccepted = z.object({
  job_id: z.string(),
  mask: z.array(z.number().int().nonnegative()),
});

export const JobStats = z.object({
  masked_vertices: z.number().int().nonnegative(),
  max_displacement: z.number().nonnegative(),
});

export const JobStatus = z.object({
  state: z.enum(["idle", "running", "done", "error"]),
  job_id: z.string().optional(),
  kind: z.string().optional(),
  stats: JobStats.optional(),
  error: z.string().optional(),
});

export const ProgressEvent = z.object({
  job_id: z.string(),
  t_remaining: z.number().int().nonnegative(),
  fraction_done: z.number().min(0).max(1),
});

export const TerminalEvent = z.object({
  job_id: z.string(),
  done: z.literal(true),
  stats: JobStats,
  error: z.string().optional(),
});

export type ProgressMessage =
  | { kind: "progress"; event: z.infer<typeof ProgressEvent> }
  | { kind: "done"; event: z.infer<typeof TerminalEvent> };

export function parseProgressMessage(raw: unknown): ProgressMessage {
  const obj = typeof raw === "string" ? JSON.parse(raw) : raw;
  if (obj && typeof obj === "object" && "done" in (obj as object)) {
    return { kind: "done", event: TerminalEvent.parse(obj) };
  }
  return { kind: "progress", event: ProgressEvent.parse(obj) };
}

export interface AnchorSpec {
  vertex: number;
  target?: Vec3T;
}

export interface RegionSpec {
  hops?: number;
  vertices?: number[];
}

export interface EditRequest {
  anchors: AnchorSpec[];
  region?: RegionSpec;
  seed?: number;
}

export class ServiceError extends Error {
  constructor(public status: number, detail: string) {
    super(`service error ${status}: ${detail}`);
  }
}

async function expectOk(res: Response): Promise<Response> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = await res.json();
      if (body && body.detail !== undefined) detail = JSON.stringify(body.detail);
    } catch {
      /* non-JSON error body */
    }
    throw new ServiceError(res.status, detail);
  }
  return res;
}

export class EditorClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async health(): Promise<{ status: string; vertex_count: number }> {
    const res = await expectOk(await this.fetchFn(`${this.baseUrl}/healthz`));
    return res.json();
  }

  async createSession(mesh?: Float32Array): Promise<z.infer<typeof SessionCreateResponse>> {
    const res = await expectOk(
      await this.fetchFn(`${this.baseUrl}/session`, {
        method: "POST",
        headers: { "content-type": "application/octet-stream" },
        body: mesh ? (mesh.buffer as ArrayBuffer).slice(mesh.byteOffset, mesh.byteOffset + mesh.byteLength) : undefined,
      }),
    );
    return SessionCreateResponse.parse(await res.json());
  }

  async getMesh(sessionId: string): Promise<Float32Array> {
    const res = await expectOk(
      await this.fetchFn(`${this.baseUrl}/session/${sessionId}/mesh`),
    );
    const buf = await res.arrayBuffer();
    if (buf.byteLength % 12 !== 0) {
      throw new ServiceError(200, `mesh payload has ${buf.byteLength} bytes, not divisible by 12`);
    }
    return new Float32Array(buf);
  }

  private async postJson(path: string, body: unknown): Promise<unknown> {
    const res = await expectOk(
      await this.fetchFn(`${this.baseUrl}${path}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
    );
    return res.json();
  }

  async edit(sessionId: string, req: EditRequest): Promise<z.infer<typeof JobAccepted>> {
    return JobAccepted.parse(await this.postJson(`/session/${sessionId}/edit`, req));
  }

  async sampleRegion(
    sessionId: string,
    req: EditRequest & { n: number },
  ): Promise<z.infer<typeof JobAccepted>> {
    return JobAccepted.parse(await this.postJson(`/session/${sessionId}/sample-region`, req));
  }

  async swap(
    sessionId: string,
    req: EditRequest & { mesh_b: Float32Array },
  ): Promise<z.infer<typeof JobAccepted>> {
    const { mesh_b, ...rest } = req;
    const b64 = base64FromFloat32(mesh_b);
    return JobAccepted.parse(
      await this.postJson(`/session/${sessionId}/swap`, { ...rest, mesh_b_b64: b64 }),
    );
  }

  async undo(sessionId: string): Promise<{ ok: true; undo_depth: number }> {
    const res = await this.postJson(`/session/${sessionId}/undo`, {});
    return z.object({ ok: z.literal(true), undo_depth: z.number().int() }).parse(res);
  }

  async jobStatus(sessionId: string): Promise<z.infer<typeof JobStatus>> {
    const res = await expectOk(
      await this.fetchFn(`${this.baseUrl}/session/${sessionId}/job`),
    );
    return JobStatus.parse(await res.json());
  }

  async getVariation(sessionId: string, k: number): Promise<Float32Array> {
    const res = await expectOk(
      await this.fetchFn(`${this.baseUrl}/session/${sessionId}/variations/${k}`),
    );
    return new Float32Array(await res.arrayBuffer());
  }

  async selectVariation(sessionId: string, k: number): Promise<void> {
    await this.postJson(`/session/${sessionId}/select-variation`, { k });
  }

  progressUrl(sessionId: string): string {
    return `${this.baseUrl.replace(/^http/, "ws")}/session/${sessionId}/progress`;
  }
}

export function base64FromFloat32(arr: Float32Array): string {
  const bytes = new Uint8Array(arr.buffer, arr.byteOffset, arr.byteLength);
  let bin = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    bin += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  if (typeof btoa !== "undefined") return btoa(bin);
  return Buffer.from(bytes).toString("base64");
}
