"""Nested mesh hierarchies: decimation, spiral orderings, upsample maps.

Coarser levels are built by greedy quadric-error half-edge collapse that
only ever removes a vertex by merging it onto an existing neighbor, so
every coarser vertex set is a strict subset of the finer one and retained
vertices keep their reference positions. Removed vertices are tied back
to the coarse surface by barycentric projection, giving the up-sampling
maps used for cross-resolution feature aggregation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import HierarchyError
from .mesh import MeshSample, TemplateTopology

SFH_MAGIC = b"SFH1"
SFH_VERSION = 1

DEFAULT_RATIOS = (1.0, 0.25, 0.0625)
DEFAULT_SPIRAL_LENGTH = 9


# ---------------------------------------------------------------------------
# quadric-error decimation


def _face_quadrics(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-vertex 4x4 quadrics summed from incident face planes (unit normals)."""
    n = positions.shape[0]
    p0, p1, p2 = (positions[faces[:, i]] for i in range(3))
    nrm = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(nrm, axis=1)
    ok = norm > 1e-12
    nrm = np.where(ok[:, None], nrm / np.where(ok, norm, 1.0)[:, None], 0.0)
    d = -np.einsum("ij,ij->i", nrm, p0)
    plane = np.concatenate([nrm, d[:, None]], axis=1)  # (F, 4)
    K = plane[:, :, None] * plane[:, None, :]  # (F, 4, 4)
    Q = np.zeros((n, 4, 4), dtype=np.float64)
    for c in range(3):
        np.add.at(Q, faces[:, c], K)
    return Q


def _collapse_cost(Q: np.ndarray, positions: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cost of collapsing u onto v: h(p_v)^T (Q_u + Q_v) h(p_v).

    Summation runs in a fixed (row-major) association order so that exact
    cost ties on symmetric meshes break identically everywhere.
    """
    h = np.concatenate([positions[v], np.ones((len(v), 1))], axis=1)  # (m, 4)
    Quv = Q[u] + Q[v]
    cost = np.zeros(len(v), dtype=np.float64)
    for i in range(4):
        acc = np.zeros(len(v), dtype=np.float64)
        for j in range(4):
            acc += Quv[:, i, j] * h[:, j]
        cost += h[:, i] * acc
    return cost


def _neighbor_sets(faces: np.ndarray, n: int) -> list[set]:
    nbr = [set() for _ in range(n)]
    for a, b, c in faces:
        nbr[a].update((b, c))
        nbr[b].update((a, c))
        nbr[c].update((a, b))
    return nbr


def decimate(
    positions: np.ndarray, faces: np.ndarray, target: int
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Greedy minimal-cost half-edge collapse down to ``target`` vertices.

    Candidates are all directed edges (u, v) meaning "remove u, merge onto
    v"; ties break on (cost, u, v). A collapse must satisfy the link
    condition so the surface stays locally manifold. Returns the sorted
    kept vertex indices, the new faces re-indexed to the kept set, and the
    collapse sequence.

    Deterministic: pure function of (positions, faces, target).
    """
    n = positions.shape[0]
    if target < 4:
        raise HierarchyError(f"decimation target {target} is below 4 vertices")
    if target > n:
        raise HierarchyError(f"decimation target {target} exceeds vertex count {n}")

    faces = faces.copy()
    alive_f = np.ones(len(faces), dtype=bool)
    alive_v = np.ones(n, dtype=bool)
    Q = _face_quadrics(positions, faces)
    sequence: list[tuple[int, int]] = []
    n_alive = n

    while n_alive > target:
        live = faces[alive_f]
        cand = np.concatenate(
            [live[:, [0, 1]], live[:, [1, 0]], live[:, [1, 2]], live[:, [2, 1]],
             live[:, [2, 0]], live[:, [0, 2]]]
        )
        cand = np.unique(cand, axis=0)
        cost = _collapse_cost(Q, positions, cand[:, 0], cand[:, 1])
        order = np.lexsort((cand[:, 1], cand[:, 0], cost))

        nbr = _neighbor_sets(live, n)
        edge_thirds: dict[tuple[int, int], set] = {}
        for a, b, c in live:
            for e, w in (((a, b), c), ((b, c), a), ((c, a), b)):
                key = (min(e), max(e))
                edge_thirds.setdefault(key, set()).add(w)

        chosen = None
        for idx in order:
            u, v = int(cand[idx, 0]), int(cand[idx, 1])
            common = nbr[u] & nbr[v]
            thirds = edge_thirds.get((min(u, v), max(u, v)), set())
            if common != thirds:
                continue  # link condition: collapse would pinch the surface
            chosen = (u, v)
            break
        if chosen is None:
            raise HierarchyError(
                f"no valid collapse left at {n_alive} vertices (target {target})"
            )

        u, v = chosen
        sequence.append((u, v))
        Q[v] = Q[v] + Q[u]
        alive_v[u] = False
        n_alive -= 1

        fidx = np.flatnonzero(alive_f)
        sub = faces[fidx]
        has_u = (sub == u).any(axis=1)
        sub[sub == u] = v
        degen = (
            (sub[:, 0] == sub[:, 1]) | (sub[:, 1] == sub[:, 2]) | (sub[:, 0] == sub[:, 2])
        )
        faces[fidx] = sub
        alive_f[fidx[degen]] = False
        # drop faces that became duplicates of an existing face
        live_idx = np.flatnonzero(alive_f)
        canon = np.sort(faces[live_idx], axis=1)
        _, first = np.unique(canon, axis=0, return_index=True)
        keep = np.zeros(len(live_idx), dtype=bool)
        keep[first] = True
        alive_f[live_idx[~keep]] = False
        del has_u

    kept = np.flatnonzero(alive_v).astype(np.int32)
    remap = np.full(n, -1, dtype=np.int32)
    remap[kept] = np.arange(len(kept), dtype=np.int32)
    new_faces = remap[faces[alive_f]]
    if len(new_faces) == 0:
        raise HierarchyError("decimation destroyed all faces")
    used = np.zeros(len(kept), dtype=bool)
    used[new_faces.ravel()] = True
    if not used.all():
        raise HierarchyError("decimation isolated a vertex")
    return kept, new_faces.astype(np.int32), sequence


# ---------------------------------------------------------------------------
# spiral orderings


def _ring_successors(faces: np.ndarray, n: int) -> list[dict]:
    """For each vertex v, the map a -> b over faces (v, a, b) in winding order."""
    succ: list[dict] = [dict() for _ in range(n)]
    for f in faces:
        for k in range(3):
            v, a, b = int(f[k]), int(f[(k + 1) % 3]), int(f[(k + 2) % 3])
            if a in succ[v]:
                raise HierarchyError(f"non-manifold fan around vertex {v}")
            succ[v][a] = b
    return succ


def _one_ring(v: int, succ: list[dict], positions: np.ndarray) -> list[int]:
    """Ordered 1-ring of v; CCW for interior vertices, chain order on boundaries.

    Closed rings rotate to start at the Euclidean-nearest neighbor; open
    chains (boundary vertices) must start at the chain head.
    """
    s = succ[v]
    if not s:
        raise HierarchyError(f"isolated vertex {v} (empty 1-ring)")
    members = set(s.keys()) | set(s.values())
    heads = [a for a in members if a not in s.values()]
    if len(heads) == 0:
        # closed ring: pick the nearest member as start
        cands = sorted(members)
        d = np.linalg.norm(positions[cands] - positions[v], axis=1)
        start = cands[int(np.argmin(d))]
    elif len(heads) == 1:
        start = heads[0]
    else:
        raise HierarchyError(f"non-manifold fan around vertex {v} (multiple chains)")
    ring = [start]
    cur = start
    while cur in s:
        cur = s[cur]
        if cur == start:
            break
        ring.append(cur)
        if len(ring) > len(members):
            raise HierarchyError(f"non-manifold fan around vertex {v}")
    return ring


def compute_spirals_from_faces(
    faces: np.ndarray, positions: np.ndarray, length: int
) -> np.ndarray:
    """Spiral table for an arbitrary face list; see :func:`compute_spirals`."""
    if length < 1:
        raise HierarchyError("spiral length must be >= 1")
    n = positions.shape[0]
    succ = _ring_successors(faces, n)
    table = np.empty((n, length), dtype=np.int32)
    for v in range(n):
        spiral = [v]
        if length > 1:
            ring = _one_ring(v, succ, positions)
            visited = set(spiral) | set(ring)
            spiral.extend(ring)
            frontier = ring
            while len(spiral) < length and frontier:
                nxt = []
                for u in frontier:
                    for w in _one_ring(u, succ, positions):
                        if w not in visited:
                            visited.add(w)
                            nxt.append(w)
                spiral.extend(nxt)
                frontier = nxt
        if len(spiral) < length:  # pad by repeating the last valid index
            spiral.extend([spiral[-1]] * (length - len(spiral)))
        table[v] = spiral[:length]
    return table


def compute_spirals(
    topology: TemplateTopology, reference: MeshSample, length: int
) -> np.ndarray:
    """Per-vertex spiral ordering: [self, 1-ring CCW from the nearest
    neighbor, 2-ring, ...], truncated or padded by repetition to ``length``.

    Deterministic given the reference positions.
    """
    if reference.vertex_count != topology.vertex_count:
        raise HierarchyError("reference mesh does not match topology")
    return compute_spirals_from_faces(topology.faces, reference.positions, length)


# ---------------------------------------------------------------------------
# closest point on a triangulated surface (for upsample maps)


def _closest_point_barycentric(p: np.ndarray, a, b, c):
    """Closest points of p to triangles (a, b, c); returns (dist2, bary) per face."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    m = len(a)
    bary = np.zeros((m, 3), dtype=np.float64)
    done = np.zeros(m, dtype=bool)

    def seal(mask, wa, wb, wc):
        mask = mask & ~done
        bary[mask, 0] = wa if np.isscalar(wa) else wa[mask]
        bary[mask, 1] = wb if np.isscalar(wb) else wb[mask]
        bary[mask, 2] = wc if np.isscalar(wc) else wc[mask]
        done[mask] = True

    seal((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
    seal((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
    seal((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)

    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    seal((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)

    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    seal((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
    seal((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t_bc, t_bc)

    denom = va + vb + vc
    inside = ~done
    with np.errstate(divide="ignore", invalid="ignore"):
        wb = np.where(denom != 0, vb / denom, 0.0)
        wc = np.where(denom != 0, vc / denom, 0.0)
    seal(inside, 1.0 - wb - wc, wb, wc)

    closest = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    dist2 = np.einsum("ij,ij->i", closest - p, closest - p)
    return dist2, bary


# ---------------------------------------------------------------------------
# the hierarchy itself


@dataclass
class HierarchyLevel:
    """One resolution level.

    ``vertices`` are global template indices (ascending). ``spirals`` index
    locally into this level. ``up_index``/``up_weight`` lift features from
    this level to the next finer one: row f of the finer level is the
    weighted sum of up to 3 local coarse vertices (weights sum to 1).
    Level 0 carries the identity lift.
    """

    vertices: np.ndarray
    spirals: np.ndarray
    up_index: np.ndarray
    up_weight: np.ndarray
    faces: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.vertices)


@dataclass
class MeshHierarchy:
    """Ordered levels (0 = full resolution) plus construction parameters."""

    levels: list
    topology_hash: int
    spiral_length: int
    ratios: tuple

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def check_nesting(self) -> bool:
        for a, b in zip(self.levels[1:], self.levels[:-1]):
            if not set(a.vertices.tolist()) < set(b.vertices.tolist()):
                return False
        return True


def build_hierarchy(
    topology: TemplateTopology,
    reference: MeshSample,
    levels: int = 3,
    ratios=DEFAULT_RATIOS,
    spiral_length: int = DEFAULT_SPIRAL_LENGTH,
) -> MeshHierarchy:
    """Build the nested hierarchy with spiral tables and upsample maps.

    ``ratios`` are kept-vertex fractions per level; the first must be 1.0
    (level 0 is the template itself) and the rest strictly decreasing.
    """
    ratios = tuple(float(r) for r in ratios)
    if levels != len(ratios):
        raise HierarchyError("levels must equal len(ratios)")
    if levels < 1:
        raise HierarchyError("need at least one level")
    if ratios[0] != 1.0:
        raise HierarchyError("ratios[0] must be 1.0 (level 0 is full resolution)")
    for a, b in zip(ratios, ratios[1:]):
        if not (0.0 < b < a <= 1.0):
            raise HierarchyError("ratios must be strictly decreasing in (0, 1]")
    if reference.vertex_count != topology.vertex_count:
        raise HierarchyError("reference mesh does not match topology")

    n = topology.vertex_count
    ident = np.zeros((n, 3), dtype=np.int32)
    ident[:, 0] = np.arange(n, dtype=np.int32)
    ident_w = np.zeros((n, 3), dtype=np.float32)
    ident_w[:, 0] = 1.0

    lvl0 = HierarchyLevel(
        vertices=np.arange(n, dtype=np.int32),
        spirals=compute_spirals_from_faces(topology.faces, reference.positions, spiral_length),
        up_index=ident,
        up_weight=ident_w,
        faces=topology.faces.copy(),
    )
    out = [lvl0]

    cur_global = lvl0.vertices
    cur_faces = topology.faces
    cur_pos = reference.positions
    for l in range(1, levels):
        target = int(round(ratios[l] * n))
        kept, new_faces, _ = decimate(cur_pos, cur_faces, target)
        new_global = cur_global[kept]
        new_pos = cur_pos[kept]

        # connectivity of the coarse edge graph must survive
        try:
            TemplateTopology(len(kept), new_faces)
        except Exception as exc:
            raise HierarchyError(f"disconnected level graph at level {l}: {exc}") from exc

        spirals = compute_spirals_from_faces(new_faces, new_pos, spiral_length)

        n_fine = len(cur_global)
        up_index = np.zeros((n_fine, 3), dtype=np.int32)
        up_weight = np.zeros((n_fine, 3), dtype=np.float32)
        in_coarse = np.full(n_fine, -1, dtype=np.int64)
        in_coarse[kept] = np.arange(len(kept))
        fa = new_pos[new_faces[:, 0]]
        fb = new_pos[new_faces[:, 1]]
        fc = new_pos[new_faces[:, 2]]
        for f in range(n_fine):
            ci = in_coarse[f]
            if ci >= 0:
                up_index[f, 0] = ci
                up_weight[f, 0] = 1.0
                continue
            d2, bary = _closest_point_barycentric(cur_pos[f], fa, fb, fc)
            best = int(np.argmin(d2))
            up_index[f] = new_faces[best]
            up_weight[f] = bary[best].astype(np.float32)

        out.append(
            HierarchyLevel(
                vertices=new_global.astype(np.int32),
                spirals=spirals,
                up_index=up_index,
                up_weight=up_weight,
                faces=new_faces,
            )
        )
        cur_global, cur_faces, cur_pos = new_global, new_faces, new_pos

    return MeshHierarchy(
        levels=out,
        topology_hash=topology.content_hash(),
        spiral_length=spiral_length,
        ratios=ratios,
    )


# ---------------------------------------------------------------------------
# hierarchy cache file (magic SFH1)


def save_hierarchy(path, hierarchy: MeshHierarchy) -> None:
    """Serialize to the SFH1 cache format (little-endian i32/f32 payloads)."""
    h = hierarchy
    with open(path, "wb") as fh:
        fh.write(SFH_MAGIC)
        fh.write(struct.pack("<I", SFH_VERSION))
        fh.write(struct.pack("<Q", h.topology_hash))
        fh.write(struct.pack("<III", h.n_levels, h.spiral_length, h.levels[0].size))
        fh.write(np.asarray(h.ratios, dtype="<f4").tobytes())
        for lvl in h.levels:
            fh.write(struct.pack("<II", lvl.size, lvl.up_index.shape[0]))
            fh.write(lvl.vertices.astype("<i4").tobytes())
            fh.write(lvl.spirals.astype("<i4").tobytes())
            fh.write(lvl.up_index.astype("<i4").tobytes())
            fh.write(lvl.up_weight.astype("<f4").tobytes())


def load_hierarchy(path, expected_hash: int | None = None) -> MeshHierarchy:
    with open(path, "rb") as fh:
        data = fh.read()

    view = memoryview(data)
    off = 0

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(data):
            raise HierarchyError(f"{path}: truncated hierarchy cache")
        chunk = view[off : off + nbytes]
        off += nbytes
        return chunk

    if bytes(take(4)) != SFH_MAGIC:
        raise HierarchyError(f"{path}: not a hierarchy cache file")
    (version,) = struct.unpack("<I", take(4))
    if version != SFH_VERSION:
        raise HierarchyError(f"{path}: unsupported cache version {version}")
    (topo_hash,) = struct.unpack("<Q", take(8))
    if expected_hash is not None and topo_hash != expected_hash:
        raise HierarchyError(
            f"{path}: topology mismatch (cache {topo_hash:#018x}, expected {expected_hash:#018x})"
        )
    n_levels, spiral_length, n0 = struct.unpack("<III", take(12))
    ratios = tuple(np.frombuffer(take(4 * n_levels), dtype="<f4").astype(float).tolist())

    levels = []
    for l in range(n_levels):
        size, n_fine = struct.unpack("<II", take(8))
        vertices = np.frombuffer(take(4 * size), dtype="<i4").copy()
        spirals = np.frombuffer(take(4 * size * spiral_length), dtype="<i4").reshape(
            size, spiral_length
        ).copy()
        up_index = np.frombuffer(take(4 * n_fine * 3), dtype="<i4").reshape(n_fine, 3).copy()
        up_weight = np.frombuffer(take(4 * n_fine * 3), dtype="<f4").reshape(n_fine, 3).copy()
        levels.append(HierarchyLevel(vertices, spirals, up_index, up_weight))
    if off != len(data):
        raise HierarchyError(f"{path}: trailing bytes in hierarchy cache")
    if levels and levels[0].size != n0:
        raise HierarchyError(f"{path}: inconsistent level sizes")
    return MeshHierarchy(levels, topo_hash, int(spiral_length), ratios)
