/**
 * Vertex picking: cast a ray from screen coordinates against the mesh and
 * take the nearest vertex of the hit triangle. Pure math (no renderer), so
 * it is unit-testable against an analytic oracle and reusable by the
 * three.js layer.
 */

export type V3 = [number, number, number];

export interface PinholeCamera {
  position: V3;
  target: V3;
  up: V3;
  fovYDegrees: number;
  aspect: number;
}

const sub = (a: V3, b: V3): V3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const add = (a: V3, b: V3): V3 => [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
const scale = (a: V3, s: number): V3 => [a[0] * s, a[1] * s, a[2] * s];
const dot = (a: V3, b: V3) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
const cross = (a: V3, b: V3): V3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];
const norm = (a: V3) => Math.sqrt(dot(a, a));
const normalize = (a: V3): V3 => scale(a, 1 / norm(a));

export interface Ray {
  origin: V3;
  dir: V3;
}

/** Ray through normalized device coordinates (x, y in [-1, 1], y up). */
export function rayFromNdc(camera: PinholeCamera, ndcX: number, ndcY: number): Ray {
  const forward = normalize(sub(camera.target, camera.position));
  const right = normalize(cross(forward, camera.up));
  const up = cross(right, forward);
  const halfH = Math.tan((camera.fovYDegrees * Math.PI) / 360);
  const halfW = halfH * camera.aspect;
  const dir = normalize(
    add(forward, add(scale(right, ndcX * halfW), scale(up, ndcY * halfH))),
  );
  return { origin: camera.position, dir };
}

export function rayFromScreen(
  camera: PinholeCamera,
  px: number,
  py: number,
  width: number,
  height: number,
): Ray {
  return rayFromNdc(camera, (2 * px) / width - 1, 1 - (2 * py) / height);
}

export interface Hit {
  faceIndex: number;
  t: number;
  point: V3;
  barycentric: V3; // weights of the face's three vertices
}

/** Moeller-Trumbore; returns null for a miss or a backface-parallel ray. */
export function intersectTriangle(ray: Ray, a: V3, b: V3, c: V3): Omit<Hit, "faceIndex"> | null {
  const e1 = sub(b, a);
  const e2 = sub(c, a);
  const p = cross(ray.dir, e2);
  const det = dot(e1, p);
  if (Math.abs(det) < 1e-12) return null;
  const inv = 1 / det;
  const s = sub(ray.origin, a);
  const u = dot(s, p) * inv;
  if (u < -1e-9 || u > 1 + 1e-9) return null;
  const q = cross(s, e1);
  const v = dot(ray.dir, q) * inv;
  if (v < -1e-9 || u + v > 1 + 1e-9) return null;
  const t = dot(e2, q) * inv;
  if (t <= 1e-9) return null;
  return {
    t,
    point: add(ray.origin, scale(ray.dir, t)),
    barycentric: [1 - u - v, u, v],
  };
}

export function raycastMesh(
  ray: Ray,
  positions: Float32Array | Float64Array,
  faces: ArrayLike<number>,
): Hit | null {
  let best: Hit | null = null;
  const vert = (i: number): V3 => [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
  for (let f = 0; f * 3 < faces.length; f++) {
    const hit = intersectTriangle(ray, vert(faces[3 * f]), vert(faces[3 * f + 1]), vert(faces[3 * f + 2]));
    if (hit && (best === null || hit.t < best.t)) {
      best = { faceIndex: f, ...hit };
    }
  }
  return best;
}

/** Nearest vertex of the hit triangle (largest barycentric weight). */
export function pickVertex(
  ray: Ray,
  positions: Float32Array | Float64Array,
  faces: ArrayLike<number>,
): number | null {
  const hit = raycastMesh(ray, positions, faces);
  if (!hit) return null;
  const ids = [faces[3 * hit.faceIndex], faces[3 * hit.faceIndex + 1], faces[3 * hit.faceIndex + 2]];
  let best = 0;
  for (let k = 1; k < 3; k++) {
    if (hit.barycentric[k] > hit.barycentric[best]) best = k;
  }
  return ids[best];
}
