/**
 * Client-side topology helpers. The faces arrive once per session; building
 * the adjacency here makes the hop-radius brush preview instant while the
 * server stays authoritative for the actual mask.
 */

export class MeshTopology {
  readonly vertexCount: number;
  readonly faces: Uint32Array; // flat triples
  private readonly adjStart: Uint32Array;
  private readonly adjFlat: Uint32Array;

  constructor(vertexCount: number, faces: ArrayLike<number>) {
    this.vertexCount = vertexCount;
    this.faces = Uint32Array.from(faces as number[]);
    if (this.faces.length % 3 !== 0) throw new Error("faces must be index triples");

    const pairs = new Set<number>();
    const key = (a: number, b: number) => Math.min(a, b) * vertexCount + Math.max(a, b);
    for (let f = 0; f < this.faces.length; f += 3) {
      const [a, b, c] = [this.faces[f], this.faces[f + 1], this.faces[f + 2]];
      if (a >= vertexCount || b >= vertexCount || c >= vertexCount) {
        throw new Error("face index out of range");
      }
      pairs.add(key(a, b));
      pairs.add(key(b, c));
      pairs.add(key(c, a));
    }
    const degree = new Uint32Array(vertexCount);
    const edges: Array<[number, number]> = [];
    for (const k of pairs) {
      const a = Math.floor(k / vertexCount);
      const b = k % vertexCount;
      edges.push([a, b]);
      degree[a] += 1;
      degree[b] += 1;
    }
    this.adjStart = new Uint32Array(vertexCount + 1);
    for (let v = 0; v < vertexCount; v++) this.adjStart[v + 1] = this.adjStart[v] + degree[v];
    this.adjFlat = new Uint32Array(this.adjStart[vertexCount]);
    const cursor = Uint32Array.from(this.adjStart.subarray(0, vertexCount));
    for (const [a, b] of edges) {
      this.adjFlat[cursor[a]++] = b;
      this.adjFlat[cursor[b]++] = a;
    }
    for (let v = 0; v < vertexCount; v++) {
      this.adjFlat.subarray(this.adjStart[v], this.adjStart[v + 1]).sort();
    }
  }

  neighbors(v: number): Uint32Array {
    return this.adjFlat.subarray(this.adjStart[v], this.adjStart[v + 1]);
  }

  /** Vertices within `hops` of any seed, excluding the seeds themselves. */
  hopBrush(seeds: Iterable<number>, hops: number): Set<number> {
    const seedSet = new Set<number>();
    for (const s of seeds) seedSet.add(s);
    const dist = new Int32Array(this.vertexCount).fill(-1);
    let frontier: number[] = [];
    for (const s of seedSet) {
      dist[s] = 0;
      frontier.push(s);
    }
    for (let d = 1; d <= hops && frontier.length; d++) {
      const next: number[] = [];
      for (const v of frontier) {
        for (const w of this.neighbors(v)) {
          if (dist[w] < 0) {
            dist[w] = d;
            next.push(w);
          }
        }
      }
      frontier = next;
    }
    const out = new Set<number>();
    for (let v = 0; v < this.vertexCount; v++) {
      if (dist[v] > 0) out.add(v);
    }
    return out;
  }
}
