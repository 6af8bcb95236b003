"""Fixed-topology triangle mesh representation, file I/O, and region masks.

Vertex order is load order and is never changed by any operation; all
downstream machinery (hierarchies, the denoiser's vertex embedding,
region masks) keys off these indices.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeshFormatError, TopologyError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class TemplateTopology:
    """Triangle connectivity of the template mesh.

    Faces are (F, 3) integer rows into the vertex array. Edges,
    per-vertex adjacency (index-sorted, for deterministic traversal)
    and a non-manifold edge report are derived on construction.
    """

    def __init__(self, vertex_count: int, faces):
        faces = np.asarray(faces, dtype=np.int32)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise TopologyError("faces must be an (F, 3) index array")
        if faces.shape[0] == 0:
            raise TopologyError("mesh has no faces")
        if vertex_count < 3:
            raise TopologyError("mesh must have at least 3 vertices")
        if faces.min() < 0 or faces.max() >= vertex_count:
            raise TopologyError("face index out of range")
        if np.any(
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        ):
            raise TopologyError("degenerate face (repeated vertex index)")

        self.vertex_count = int(vertex_count)
        self.faces = faces

        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e.sort(axis=1)
        self.edges, counts = np.unique(e, axis=0, return_counts=True)
        # an undirected edge shared by >2 faces is non-manifold; report, don't reject
        self.nonmanifold_edges = self.edges[counts > 2]
        self.boundary_edges = self.edges[counts == 1]

        # CSR adjacency with neighbor lists sorted by index
        sym = np.concatenate([self.edges, self.edges[:, ::-1]])
        order = np.lexsort((sym[:, 1], sym[:, 0]))
        sym = sym[order]
        self._adj_flat = sym[:, 1].astype(np.int32)
        self._adj_start = np.zeros(vertex_count + 1, dtype=np.int64)
        np.add.at(self._adj_start, sym[:, 0] + 1, 1)
        np.cumsum(self._adj_start, out=self._adj_start)

        if np.any(np.diff(self._adj_start) == 0):
            raise TopologyError("isolated vertex (not referenced by any face)")
        if not self._connected():
            raise TopologyError("edge graph is disconnected")

    def neighbors(self, v: int) -> np.ndarray:
        return self._adj_flat[self._adj_start[v] : self._adj_start[v + 1]]

    def _connected(self) -> bool:
        seen = np.zeros(self.vertex_count, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            v = stack.pop()
            for w in self.neighbors(v):
                if not seen[w]:
                    seen[w] = True
                    stack.append(int(w))
        return bool(seen.all())

    def content_hash(self) -> int:
        """FNV-1a over the face indices (little-endian u32 stream)."""
        return fnv1a64(self.faces.astype("<u4").tobytes())

    def hop_distances(self, sources, max_hops: int | None = None) -> np.ndarray:
        """BFS hop distance from a vertex (or set of vertices); -1 beyond max_hops."""
        if np.isscalar(sources):
            sources = [int(sources)]
        dist = np.full(self.vertex_count, -1, dtype=np.int32)
        frontier = np.array(sorted(set(int(s) for s in sources)), dtype=np.int32)
        dist[frontier] = 0
        d = 0
        while frontier.size and (max_hops is None or d < max_hops):
            d += 1
            nxt = []
            for v in frontier:
                for w in self.neighbors(int(v)):
                    if dist[w] < 0:
                        dist[w] = d
                        nxt.append(int(w))
            frontier = np.array(nxt, dtype=np.int32)
        return dist


@dataclass
class MeshSample:
    """Per-vertex 3D positions on the template (model units; 1 unit = 1 mm)."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise MeshFormatError("positions must be an (N, 3) array")
        if not np.isfinite(self.positions).all():
            raise MeshFormatError("non-finite vertex position")

    @property
    def vertex_count(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "MeshSample":
        return MeshSample(self.positions.copy())


@dataclass
class RegionMask:
    """Per-vertex editable flags plus the anchor set.

    ``flags[v]`` is True when vertex v is noised/resampled. Anchors are
    conditioning vertices and are never part of the masked set; each may
    carry a target position (model units) or None to stay in place.
    """

    flags: np.ndarray
    anchors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.ndim != 1:
            raise ConfigError("mask flags must be a 1-D boolean array")
        self.anchors = {int(v): (None if t is None else np.asarray(t, dtype=np.float64))
                        for v, t in self.anchors.items()}
        for v, t in self.anchors.items():
            if v < 0 or v >= self.flags.shape[0]:
                raise ConfigError(f"anchor vertex {v} out of range")
            if self.flags[v]:
                raise ConfigError(f"anchor vertex {v} is inside the masked set")
            if t is not None and (t.shape != (3,) or not np.isfinite(t).all()):
                raise ConfigError(f"anchor {v} has an invalid target position")

    @property
    def masked_count(self) -> int:
        return int(self.flags.sum())

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)


@dataclass
class MaskConfig:
    """Random training-mask distribution: hop radius cap and full-mask rate."""

    k_max: int = 4
    full_mask_probability: float = 0.1

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if not 0.0 <= self.full_mask_probability <= 1.0:
            raise ConfigError("full_mask_probability must be in [0, 1]")


def khop_mask(topology: TemplateTopology, anchor: int, k: int) -> RegionMask:
    """Mask the vertices with hop distance in [1, k] of ``anchor``.

    The anchor itself stays unmasked and becomes the single anchor of the
    returned mask; k=0 gives an empty mask.
    """
    if k < 0:
        raise ConfigError("k must be >= 0")
    if not 0 <= anchor < topology.vertex_count:
        raise ConfigError("anchor vertex out of range")
    dist = topology.hop_distances(anchor, max_hops=k if k > 0 else 0)
    flags = (dist >= 1) & (dist <= k)
    return RegionMask(flags, {int(anchor): None})


def full_mask(topology: TemplateTopology) -> RegionMask:
    """All-vertices mask with an empty anchor set (global generation)."""
    return RegionMask(np.ones(topology.vertex_count, dtype=bool), {})


def sample_training_mask(
    topology: TemplateTopology, rng: np.random.Generator, config: MaskConfig
) -> RegionMask:
    """Draw a random training mask.

    With probability ``full_mask_probability`` every vertex is masked
    (anchors empty); otherwise a uniform anchor vertex and a hop radius
    k ~ Uniform{1..k_max}. Pure function of the generator state.
    """
    if rng.random() < config.full_mask_probability:
        return full_mask(topology)
    anchor = int(rng.integers(0, topology.vertex_count))
    k = int(rng.integers(1, config.k_max + 1))
    return khop_mask(topology, anchor, k)


def default_k_max(topology: TemplateTopology, target_fraction: float = 0.4) -> int:
    """Largest k whose mean k-hop ball covers at most ``target_fraction`` of vertices."""
    n = topology.vertex_count
    probes = range(n) if n <= 512 else range(0, n, n // 512)
    probes = list(probes)
    sizes = np.zeros((len(probes),), dtype=np.int64)
    dists = [topology.hop_distances(p) for p in probes]
    k = 0
    while True:
        k += 1
        for i, d in enumerate(dists):
            sizes[i] = np.count_nonzero((d >= 1) & (d <= k))
        if sizes.mean() > target_fraction * n:
            return max(1, k - 1)
        if all((d <= k).all() for d in dists):  # saturated: graph diameter reached
            return max(1, k)


# ---------------------------------------------------------------------------
# mesh file I/O


def _format_float(x: float) -> str:
    # repr round-trips float64 exactly through the text format
    return repr(float(x))


def load_obj(path) -> tuple[TemplateTopology, MeshSample]:
    positions = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex record")
                try:
                    positions.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif parts[0] == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise MeshFormatError(f"{path}:{lineno}: non-triangular face")
                face = []
                for tok in idx:
                    tok = tok.split("/")[0]
                    try:
                        i = int(tok)
                    except ValueError as exc:
                        raise MeshFormatError(f"{path}:{lineno}: bad face index") from exc
                    if i < 0:
                        i = len(positions) + 1 + i
                    face.append(i - 1)
                faces.append(face)
            # everything else (vn, vt, usemtl, o, g, s, ...) is ignored
    if not positions:
        raise MeshFormatError(f"{path}: no vertices")
    pos = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int32)
    if faces.size and (faces.min() < 0 or faces.max() >= len(positions)):
        raise MeshFormatError(f"{path}: face index out of range")
    try:
        topo = TemplateTopology(len(positions), faces)
    except TopologyError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc
    return topo, MeshSample(pos)


def save_obj(path, topology: TemplateTopology, sample: MeshSample) -> None:
    _check_pair(topology, sample)
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in sample.positions:
            fh.write(f"v {_format_float(x)} {_format_float(y)} {_format_float(z)}\n")
        for a, b, c in topology.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


_PLY_TYPES = {"float": ("<f4", 4), "float32": ("<f4", 4), "double": ("<f8", 8), "float64": ("<f8", 8)}


def load_ply(path) -> tuple[TemplateTopology, MeshSample]:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    if not any(line.strip() == "format binary_little_endian 1.0" for line in header):
        raise MeshFormatError(f"{path}: only binary little-endian PLY is supported")

    n_vert = n_face = None
    vert_props: list[str] = []
    current = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            if parts[1] == "list":
                raise MeshFormatError(f"{path}: list property on vertex element")
            vert_props.append(parts[1])
    if n_vert is None or n_face is None:
        raise MeshFormatError(f"{path}: missing vertex or face element")
    if len(vert_props) != 3 or any(p not in _PLY_TYPES for p in vert_props):
        raise MeshFormatError(f"{path}: vertex element must be exactly x/y/z float or double")
    if len(set(vert_props)) != 1:
        raise MeshFormatError(f"{path}: mixed vertex property types")

    dtype, width = _PLY_TYPES[vert_props[0]]
    need = n_vert * 3 * width
    if len(body) < need:
        raise MeshFormatError(f"{path}: truncated vertex data")
    pos = np.frombuffer(body[:need], dtype=dtype).reshape(n_vert, 3).astype(np.float64)
    off = need

    faces = np.empty((n_face, 3), dtype=np.int32)
    for i in range(n_face):
        if off + 1 > len(body):
            raise MeshFormatError(f"{path}: truncated face data")
        cnt = body[off]
        off += 1
        if cnt != 3:
            raise MeshFormatError(f"{path}: non-triangular face")
        if off + 12 > len(body):
            raise MeshFormatError(f"{path}: truncated face data")
        faces[i] = struct.unpack_from("<3i", body, off)
        off += 12
    try:
        topo = TemplateTopology(n_vert, faces)
    except TopologyError as exc:
        raise MeshFormatError(f"{path}: {exc}") from exc
    return topo, MeshSample(pos)


def save_ply(path, topology: TemplateTopology, sample: MeshSample) -> None:
    _check_pair(topology, sample)
    n = sample.vertex_count
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        f"element face {topology.faces.shape[0]}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(sample.positions.astype("<f8").tobytes())
        for a, b, c in topology.faces:
            fh.write(struct.pack("<B3i", 3, a, b, c))


def load_mesh(path, fmt: str | None = None) -> tuple[TemplateTopology, MeshSample]:
    """Load an OBJ or PLY mesh; format inferred from the extension unless given."""
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".").lower()
    fmt = fmt.lower()
    if fmt == "obj":
        return load_obj(path)
    if fmt == "ply":
        return load_ply(path)
    raise MeshFormatError(f"unsupported mesh format: {fmt!r}")


def save_mesh(path, topology: TemplateTopology, sample: MeshSample, fmt: str | None = None) -> None:
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".").lower()
    fmt = fmt.lower()
    if fmt == "obj":
        save_obj(path, topology, sample)
    elif fmt == "ply":
        save_ply(path, topology, sample)
    else:
        raise MeshFormatError(f"unsupported mesh format: {fmt!r}")


def _check_pair(topology: TemplateTopology, sample: MeshSample) -> None:
    if sample.vertex_count != topology.vertex_count:
        raise TopologyError(
            f"sample has {sample.vertex_count} vertices, topology expects {topology.vertex_count}"
        )
