/**
 * Browser bootstrap: wires the DOM, the editor workflow, and the three.js
 * viewer together. Served statically next to the edit service.
 */

import { EditorClient } from "./api.js";
import { EditorApp } from "./app.js";
import { Viewer } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const canvas = el<HTMLCanvasElement>("viewport");
  const status = el<HTMLDivElement>("status");
  const toast = (msg: string) => {
    status.textContent = msg;
    status.classList.add("error");
    setTimeout(() => status.classList.remove("error"), 4000);
  };

  const client = new EditorClient(window.location.origin);
  const app = new EditorApp(client, WebSocket as never);
  const viewer = new Viewer(canvas);

  app.onError = toast;
  app.onGeometry = (g) => {
    if (app.topology) viewer.setMesh(g, app.topology);
  };
  app.onHeatmap = (h) => {
    if (app.state.view.heatmapEnabled) {
      viewer.paintHeatmap(h, app.state.view.heatmapRangeMm);
    }
  };

  await app.openSession();
  status.textContent = `session ${app.state.sessionId} (${app.state.vertexCount} vertices)`;

  let tool: "anchor" | "brush" = "anchor";
  el<HTMLButtonElement>("tool-anchor").onclick = () => (tool = "anchor");
  el<HTMLButtonElement>("tool-brush").onclick = () => (tool = "brush");

  const hopsInput = el<HTMLInputElement>("hops");
  canvas.addEventListener("pointerdown", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const v = viewer.pick(ev.clientX - rect.left, ev.clientY - rect.top);
    if (v === null) return; // off-mesh click: no-op
    if (tool === "anchor") {
      app.state.addAnchor(v);
    } else {
      const hops = Number(hopsInput.value) || 3;
      for (const w of app.brushPreview(hops)) app.state.select(w);
      app.state.select(v);
    }
    viewer.paintSelection(app.state.selection, app.state.anchors);
    viewer.drawAnchorHandles(app.state.anchors);
  });

  // drag the most recent anchor along the screen-right axis with a slider
  const dragInput = el<HTMLInputElement>("drag-mm");
  el<HTMLButtonElement>("apply-drag").onclick = () => {
    const anchors = [...app.state.anchors.keys()];
    if (anchors.length === 0 || !app.geometry) return toast("place an anchor first");
    const v = anchors[anchors.length - 1];
    const mm = Number(dragInput.value) || 0;
    const target: [number, number, number] = [
      app.geometry[3 * v] + mm,
      app.geometry[3 * v + 1],
      app.geometry[3 * v + 2],
    ];
    app.state.dragAnchor(v, target);
    viewer.drawAnchorHandles(app.state.anchors);
  };

  const progress = el<HTMLProgressElement>("progress");
  const tick = setInterval(() => {
    progress.value = app.state.progress ?? 0;
    progress.style.visibility = app.state.busy ? "visible" : "hidden";
  }, 50);
  window.addEventListener("beforeunload", () => clearInterval(tick));

  el<HTMLButtonElement>("run-edit").onclick = async () => {
    try {
      const hops = Number(hopsInput.value) || 3;
      const out = await app.requestEdit({ hops, seed: Date.now() % 100000 });
      status.textContent =
        `edit done: ${out.mask.length} masked vertices, ` +
        `max displacement ${out.progress.stats?.max_displacement.toFixed(2)} mm`;
    } catch {
      /* surfaced via onError */
    }
  };

  el<HTMLButtonElement>("undo").onclick = async () => {
    try {
      await app.undo();
      status.textContent = "undone";
    } catch {
      toast("nothing to undo");
    }
  };

  el<HTMLButtonElement>("variations").onclick = async () => {
    try {
      const hops = Number(hopsInput.value) || 3;
      const gallery = await app.sampleVariations(4, { hops, seed: Date.now() % 100000 });
      const picks = el<HTMLDivElement>("gallery");
      picks.replaceChildren();
      gallery.forEach((_, k) => {
        const b = document.createElement("button");
        b.textContent = `variation ${k}`;
        b.onclick = () => app.selectVariation(k);
        picks.appendChild(b);
      });
    } catch {
      /* surfaced via onError */
    }
  };
}

boot().catch((err) => {
  document.body.textContent = `failed to start: ${err}`;
});
