/**
 * End-to-end editor workflow against a live edit service: create a session,
 * place two anchors by raycast picking, drag one, run an edit, and check
 * the rendered heatmap is exactly zero outside the requested region
 * (mask-echo) with exactly one terminal progress message.
 */

import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { WebSocket } from "ws";

import { EditorClient } from "../src/api.js";
import { EditorApp } from "../src/app.js";
import { zeroSet } from "../src/heatmap.js";
import { pickVertex, PinholeCamera, rayFromNdc } from "../src/picking.js";

const PY = process.env.MESHSCULPT_PYTHON ?? "python3";
const PORT = 8700 + Math.floor(Math.random() * 800);
const BASE = `http://127.0.0.1:${PORT}`;

let workdir: string;
let server: ChildProcess | null = null;

function cli(...args: string[]): void {
  execFileSync(PY, ["-m", "meshsculpt.cli", ...args], { stdio: "pipe" });
}

async function waitHealthy(timeoutMs = 60_000): Promise<void> {
  const t0 = Date.now();
  while (Date.now() - t0 < timeoutMs) {
    try {
      const res = await fetch(`${BASE}/healthz`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error("service did not become healthy");
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "meshsculpt-ui-"));
  const data = join(workdir, "data");
  const run = join(workdir, "run");
  cli("gen-data", "--out", data, "--rows", "8", "--cols", "10", "--modes", "4",
      "--samples", "32", "--test", "4", "--noise-std", "0.5", "--seed", "3");
  cli("train", "--data", data, "--out", run, "--epochs", "2", "--batch-size", "8",
      "--T", "8", "--k-max", "2", "--seed", "0");
  server = spawn(
    PY,
    ["-m", "meshsculpt.cli", "serve",
     "--model", join(run, "final.sfd"),
     "--template", join(data, "template.obj"),
     "--port", String(PORT), "--progress-every", "2", "--threads", "1"],
    { stdio: "pipe" },
  );
  await waitHealthy();
});

afterAll(() => {
  server?.kill("SIGKILL"); // uvicorn's graceful shutdown can wait on sockets
  rmSync(workdir, { recursive: true, force: true });
});

describe("editor against the live service", () => {
  it("session, two picked anchors, drag, edit: localized heatmap and one done message", async () => {
    const client = new EditorClient(BASE);
    const app = new EditorApp(client, WebSocket as never);
    await app.openSession();
    expect(app.state.vertexCount).toBe(72);
    const before = app.geometry!.slice();

    // place two anchors by picking through a synthetic camera
    const center = [0, 1, 2].map((c) => {
      let s = 0;
      for (let v = 0; v < 72; v++) s += before[3 * v + c];
      return s / 72;
    }) as [number, number, number];
    const cam: PinholeCamera = {
      position: [center[0], center[1], center[2] + 500],
      target: center,
      up: [0, 1, 0],
      fovYDegrees: 40,
      aspect: 1,
    };
    const v1 = pickVertex(rayFromNdc(cam, 0, 0), before, app.topology!.faces)!;
    const v2 = pickVertex(rayFromNdc(cam, 0.12, 0.1), before, app.topology!.faces)!;
    expect(v1).not.toBeNull();
    expect(v2).not.toBeNull();
    expect(v1).not.toBe(v2);
    app.state.addAnchor(v1);
    app.state.addAnchor(v2);

    // drag the first anchor outward by 6mm along x
    app.state.dragAnchor(v1, [before[3 * v1] + 6, before[3 * v1 + 1], before[3 * v1 + 2]]);

    const fractions: number[] = [];
    const outcome = await app.requestEdit({ hops: 2, seed: 42 });
    outcome.progress.fractions.forEach((f) => fractions.push(f));

    // exactly one terminal message, fractions strictly increasing to 1.0
    expect(outcome.progress.doneCount).toBe(1);
    const sorted = [...fractions].sort((a, b) => a - b);
    expect(fractions).toEqual(sorted);
    expect(new Set(fractions).size).toBe(fractions.length);
    expect(fractions[fractions.length - 1]).toBe(1.0);
    expect(fractions.filter((f) => f === 1.0)).toHaveLength(1);
    expect(outcome.progress.stats!.masked_vertices).toBe(outcome.mask.length);

    // mask-echo: the heatmap-zero set equals the complement of the requested
    // region (server mask plus the dragged anchor)
    expect(outcome.violations).toEqual([]);
    const allowed = new Set<number>([...outcome.mask, v1]);
    const zeros = zeroSet(outcome.displacement);
    const complement = new Set<number>();
    for (let v = 0; v < 72; v++) if (!allowed.has(v)) complement.add(v);
    for (const v of complement) expect(zeros.has(v)).toBe(true);
    for (const v of allowed) expect(zeros.has(v)).toBe(false);

    // the untouched anchor stayed exactly in place
    for (let c = 0; c < 3; c++) {
      expect(app.geometry![3 * v2 + c]).toBe(before[3 * v2 + c]);
    }

    // undo restores the exact pre-edit buffer
    const restored = await app.undo();
    expect(Buffer.from(restored.buffer).equals(Buffer.from(before.buffer))).toBe(true);
  });

  it("variation gallery round trip", async () => {
    const client = new EditorClient(BASE);
    const app = new EditorApp(client, WebSocket as never);
    await app.openSession();
    const before = app.geometry!.slice();
    app.state.addAnchor(10);
    const gallery = await app.sampleVariations(3, { hops: 2, seed: 7 });
    expect(gallery).toHaveLength(3);
    expect(Buffer.from(app.geometry!.buffer).equals(Buffer.from(before.buffer))).toBe(true);
    await app.selectVariation(1);
    expect(Buffer.from(app.geometry!.buffer).equals(Buffer.from(gallery[1].buffer))).toBe(true);
  });

  it("swap keeps the exterior bit-exact", async () => {
    const client = new EditorClient(BASE);
    const app = new EditorApp(client, WebSocket as never);
    await app.openSession();
    const before = app.geometry!.slice();
    const donor = before.map((x, i) => (i % 3 === 0 ? x * 1.05 : x));
    const region = [...app.topology!.hopBrush([30], 2), 30];
    const outcome = await app.swapRegion(new Float32Array(donor), region, 3);
    expect(outcome.violations).toEqual([]);
    const regionSet = new Set(region);
    for (let v = 0; v < 72; v++) {
      if (!regionSet.has(v)) {
        for (let c = 0; c < 3; c++) {
          expect(app.geometry![3 * v + c]).toBe(before[3 * v + c]);
        }
      }
    }
  });

  it("service errors surface as toasts with state rollback", async () => {
    const client = new EditorClient(BASE);
    const app = new EditorApp(client, WebSocket as never);
    await app.openSession();
    const errors: string[] = [];
    app.onError = (m) => errors.push(m);
    await expect(app.requestEdit({ hops: 2 })).rejects.toThrow(/drag at least one anchor/);
    app.state.addAnchor(0);
    app.state.dragAnchor(0, [1e6, 0, 0]);
    // a second session keeps the server busy? no: just check a 4xx path by
    // sending an out-of-range region through the raw client
    await expect(
      client.edit(app.state.sessionId!, { anchors: [{ vertex: 10_000 }] }),
    ).rejects.toThrow(/service error 400/);
    expect(app.state.busy).toBe(false);
  });
});
