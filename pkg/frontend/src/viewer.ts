/**
 * three.js rendering layer: mesh display, anchor handles, heatmap colors,
 * orbit-style camera, and pointer picking. Browser-only; everything with
 * testable logic lives in the renderer-free modules.
 */

import * as THREE from "three";

import { heatmapColors } from "./heatmap.js";
import { PinholeCamera, pickVertex, rayFromScreen } from "./picking.js";
import { MeshTopology } from "./topology.js";

const BASE_COLOR = new THREE.Color(0.75, 0.75, 0.78);
const SELECT_COLOR = new THREE.Color(0.25, 0.55, 0.95);
const ANCHOR_COLOR = new THREE.Color(0.2, 0.3, 1.0);
const TARGET_COLOR = new THREE.Color(1.0, 0.25, 0.2);

export class Viewer {
  readonly scene = new THREE.Scene();
  readonly camera: THREE.PerspectiveCamera;
  private readonly renderer: THREE.WebGLRenderer;
  private mesh: THREE.Mesh | null = null;
  private geometry: THREE.BufferGeometry | null = null;
  private positions: Float32Array | null = null;
  private topology: MeshTopology | null = null;
  private handles = new THREE.Group();

  constructor(private readonly canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(45, canvas.width / canvas.height, 0.1, 1e5);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.45));
    const key = new THREE.DirectionalLight(0xffffff, 0.9);
    key.position.set(1, 1, 2);
    this.scene.add(key);
    this.scene.add(this.handles);
  }

  setMesh(positions: Float32Array, topology: MeshTopology): void {
    this.positions = positions;
    this.topology = topology;
    if (!this.geometry) {
      this.geometry = new THREE.BufferGeometry();
      this.geometry.setIndex(new THREE.BufferAttribute(topology.faces.slice(), 1));
      const material = new THREE.MeshStandardMaterial({ vertexColors: true, flatShading: false });
      this.mesh = new THREE.Mesh(this.geometry, material);
      this.scene.add(this.mesh);
    }
    this.geometry.setAttribute("position", new THREE.BufferAttribute(positions.slice(), 3));
    const colors = new Float32Array(positions.length);
    for (let v = 0; v < positions.length / 3; v++) BASE_COLOR.toArray(colors, 3 * v);
    this.geometry.setAttribute("color", new THREE.BufferAttribute(colors, 3));
    this.geometry.computeVertexNormals();
    this.geometry.computeBoundingSphere();
    const bs = this.geometry.boundingSphere!;
    this.camera.position.set(bs.center.x, bs.center.y, bs.center.z + 3 * bs.radius);
    this.camera.lookAt(bs.center);
    this.render();
  }

  paintSelection(selection: Set<number>, anchors: Map<number, unknown>): void {
    if (!this.geometry) return;
    const attr = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    const colors = attr.array as Float32Array;
    for (let v = 0; v < colors.length / 3; v++) {
      const c = anchors.has(v) ? ANCHOR_COLOR : selection.has(v) ? SELECT_COLOR : BASE_COLOR;
      c.toArray(colors, 3 * v);
    }
    attr.needsUpdate = true;
    this.render();
  }

  paintHeatmap(displacement: Float64Array, manualRange: number | null): void {
    if (!this.geometry) return;
    const attr = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    (attr.array as Float32Array).set(heatmapColors(displacement, manualRange));
    attr.needsUpdate = true;
    this.render();
  }

  drawAnchorHandles(anchors: Map<number, [number, number, number] | null>): void {
    this.handles.clear();
    if (!this.positions) return;
    const r = (this.geometry?.boundingSphere?.radius ?? 1) * 0.02;
    for (const [v, target] of anchors) {
      const pin = new THREE.Mesh(
        new THREE.SphereGeometry(r, 12, 12),
        new THREE.MeshBasicMaterial({ color: ANCHOR_COLOR }),
      );
      pin.position.fromArray(this.positions, 3 * v);
      this.handles.add(pin);
      if (target) {
        const tgt = new THREE.Mesh(
          new THREE.SphereGeometry(r, 12, 12),
          new THREE.MeshBasicMaterial({ color: TARGET_COLOR }),
        );
        tgt.position.set(...target);
        this.handles.add(tgt);
      }
    }
    this.render();
  }

  /** Nearest vertex of the triangle under the pointer, or null. */
  pick(px: number, py: number): number | null {
    if (!this.positions || !this.topology) return null;
    const cam: PinholeCamera = {
      position: this.camera.position.toArray() as [number, number, number],
      target: this.camera.getWorldDirection(new THREE.Vector3())
        .add(this.camera.position)
        .toArray() as [number, number, number],
      up: this.camera.up.toArray() as [number, number, number],
      fovYDegrees: this.camera.fov,
      aspect: this.camera.aspect,
    };
    const ray = rayFromScreen(cam, px, py, this.canvas.width, this.canvas.height);
    return pickVertex(ray, this.positions, this.topology.faces);
  }

  render(): void {
    this.renderer.render(this.scene, this.camera);
  }
}
