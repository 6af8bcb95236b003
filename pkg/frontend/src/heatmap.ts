/**
 * Per-vertex displacement heatmaps. Displacements are computed from raw
 * served geometry (float32), so a vertex the service preserved exactly
 * shows exactly zero - the localization guarantee stays visible rather
 * than being smeared by rendering arithmetic.
 */

export function displacementMagnitudes(before: Float32Array, after: Float32Array): Float64Array {
  if (before.length !== after.length || before.length % 3 !== 0) {
    throw new Error("mesh buffers disagree in size");
  }
  const n = before.length / 3;
  const out = new Float64Array(n);
  for (let v = 0; v < n; v++) {
    const dx = after[3 * v] - before[3 * v];
    const dy = after[3 * v + 1] - before[3 * v + 1];
    const dz = after[3 * v + 2] - before[3 * v + 2];
    out[v] = Math.sqrt(dx * dx + dy * dy + dz * dz);
  }
  return out;
}

export function zeroSet(displacement: Float64Array): Set<number> {
  const out = new Set<number>();
  for (let v = 0; v < displacement.length; v++) {
    if (displacement[v] === 0) out.add(v);
  }
  return out;
}

/**
 * Mask-echo check: the heatmap must be exactly zero outside the requested
 * region (the service-reported mask plus any anchors that were dragged to
 * new positions). Returns the offending vertices, empty when the
 * localization guarantee holds.
 */
export function heatmapViolations(
  displacement: Float64Array,
  maskEcho: Iterable<number>,
  movedAnchors: Iterable<number> = [],
): number[] {
  const allowed = new Set<number>();
  for (const v of maskEcho) allowed.add(v);
  for (const v of movedAnchors) allowed.add(v);
  const bad: number[] = [];
  for (let v = 0; v < displacement.length; v++) {
    if (!allowed.has(v) && displacement[v] !== 0) bad.push(v);
  }
  return bad;
}

/** 95th-percentile autorange (mm); manual override wins when provided. */
export function heatmapRange(displacement: Float64Array, manual?: number | null): number {
  if (manual != null) {
    if (manual < 0) throw new Error("heatmap range must be >= 0");
    return manual;
  }
  const nonzero = Array.from(displacement).filter((d) => d > 0).sort((a, b) => a - b);
  if (nonzero.length === 0) return 1e-6;
  const idx = Math.min(nonzero.length - 1, Math.floor(0.95 * nonzero.length));
  return Math.max(nonzero[idx], 1e-9);
}

/** Perceptually-uniform-ish ramp (viridis control points, linear blend). */
const RAMP: Array<[number, number, number]> = [
  [0.267, 0.005, 0.329],
  [0.283, 0.141, 0.458],
  [0.254, 0.265, 0.53],
  [0.207, 0.372, 0.553],
  [0.164, 0.471, 0.558],
  [0.128, 0.567, 0.551],
  [0.135, 0.659, 0.518],
  [0.267, 0.749, 0.441],
  [0.478, 0.821, 0.318],
  [0.741, 0.873, 0.15],
  [0.993, 0.906, 0.144],
];

export function colormap(value: number, range: number): [number, number, number] {
  const x = range > 0 ? Math.min(Math.max(value / range, 0), 1) : 0;
  const pos = x * (RAMP.length - 1);
  const i = Math.min(Math.floor(pos), RAMP.length - 2);
  const f = pos - i;
  const lo = RAMP[i];
  const hi = RAMP[i + 1];
  return [
    lo[0] + f * (hi[0] - lo[0]),
    lo[1] + f * (hi[1] - lo[1]),
    lo[2] + f * (hi[2] - lo[2]),
  ];
}

export function heatmapColors(
  displacement: Float64Array,
  manualRange?: number | null,
): Float32Array {
  const range = heatmapRange(displacement, manualRange);
  const out = new Float32Array(displacement.length * 3);
  for (let v = 0; v < displacement.length; v++) {
    const [r, g, b] = colormap(displacement[v], range);
    out[3 * v] = r;
    out[3 * v + 1] = g;
    out[3 * v + 2] = b;
  }
  return out;
}
