"""User-facing editing operations: region sampling, anchor edits, swaps,
sparse reconstruction, and unconditional generation.

All of these are thin orchestrations over the masked reverse sampler. The
contract they all share: vertices outside the mask (and anchor vertices,
which are moved to their targets first) come back bit-identical to the
conditioning mesh, in model units. The sampler works in normalized
diffusion space; masked vertices are de-normalized on the way out while
conditioned vertices are copied through verbatim, so no round-trip error
can leak into the preserved region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserParams, DenoiserPlan, forward_batch, load_checkpoint, require_hash
from .diffusion import NoiseSchedule, _reverse_batch
from .errors import ConfigError, TopologyMismatch
from .hierarchy import MeshHierarchy
from .mesh import MeshSample, RegionMask, TemplateTopology, full_mask, khop_mask
from .training import Normalization


@dataclass
class EditModel:
    """A trained denoiser bound to its template topology and hierarchy."""

    topology: TemplateTopology
    hierarchy: MeshHierarchy
    plan: DenoiserPlan
    params: DenoiserParams
    schedule: NoiseSchedule
    norm: Normalization
    mean_shape: np.ndarray  # model units
    k_max: int = 4
    full_mask_probability: float = 0.1

    @classmethod
    def load(cls, checkpoint_path, topology: TemplateTopology, hierarchy: MeshHierarchy)\
            -> "EditModel":
        params, schedule, ckpt_hash, extras = load_checkpoint(checkpoint_path)
        require_hash(ckpt_hash, topology.content_hash())
        if hierarchy.topology_hash != ckpt_hash:
            raise TopologyMismatch("hierarchy was built for a different topology")
        norm = Normalization(
            center=extras["norm.center"].astype(np.float64),
            scale=float(extras["norm.scale"]),
        )
        mean_shape = extras["norm.mean_shape"].astype(np.float64)
        return cls(
            topology=topology,
            hierarchy=hierarchy,
            plan=DenoiserPlan(hierarchy),
            params=params,
            schedule=schedule,
            norm=norm,
            mean_shape=mean_shape,
            k_max=int(extras.get("mask.k_max", np.float32(4))),
            full_mask_probability=float(extras.get("mask.full_probability", np.float32(0.1))),
        )

    def denoise_fn(self):
        params, plan = self.params, self.plan

        def fn(X, t, M):
            eps, _ = forward_batch(X, t, M, params, plan)
            return eps

        return fn

    def sample_batch(
        self,
        conditions: np.ndarray,
        mask: RegionMask,
        rng: np.random.Generator,
        progress_cb=None,
        progress_every: int = 50,
    ) -> np.ndarray:
        """Reverse-sample B meshes sharing one mask; returns model units.

        Rows of ``conditions`` are model-unit meshes whose anchor vertices
        have already been moved to their targets.
        """
        from .tuning import tune_allocator

        tune_allocator()
        conditions = np.asarray(conditions, dtype=np.float64)
        B, N, _ = conditions.shape
        if N != self.topology.vertex_count:
            raise TopologyMismatch(
                f"mesh has {N} vertices, model expects {self.topology.vertex_count}"
            )
        flags = np.broadcast_to(mask.flags, (B, N))
        cond_n = self.norm.to_diffusion_space(conditions)
        out_n = _reverse_batch(
            cond_n, flags, self.denoise_fn(), self.schedule, rng,
            progress_cb=progress_cb, progress_every=progress_every,
        )
        out = self.norm.to_model_space(out_n)
        out[~flags] = conditions[~flags]  # exact preservation in model units
        return out


def _apply_anchors(positions: np.ndarray, anchors: dict) -> np.ndarray:
    out = positions.copy()
    for v, target in anchors.items():
        if target is not None:
            t = np.asarray(target, dtype=np.float64)
            if t.shape != (3,) or not np.isfinite(t).all():
                raise ConfigError(f"anchor {v} target must be a finite 3-vector")
            out[v] = t
    return out


def sample_region(
    mesh: MeshSample, mask: RegionMask, n: int, model: EditModel, seed: int,
    progress_cb=None, progress_every: int = 50,
) -> list:
    """Draw n independent resamplings of the masked region of ``mesh``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    cond = _apply_anchors(mesh.positions, mask.anchors)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = model.sample_batch(
        np.repeat(cond[None], n, axis=0), mask, rng,
        progress_cb=progress_cb, progress_every=progress_every,
    )
    return [MeshSample(out[i]) for i in range(n)]


def anchor_region_mask(
    topology: TemplateTopology, anchors: list, region_hops: int, region_vertices=None
) -> RegionMask:
    """Mask for anchor-driven edits: k-hop union around the anchors (or an
    explicit vertex set) minus the anchor vertices themselves."""
    if not anchors:
        raise ConfigError("need at least one anchor")
    anchor_map = {}
    for v, target in anchors:
        anchor_map[int(v)] = None if target is None else np.asarray(target, dtype=np.float64)
    flags = np.zeros(topology.vertex_count, dtype=bool)
    if region_vertices is not None:
        flags[np.asarray(list(region_vertices), dtype=np.int64)] = True
    else:
        for v in anchor_map:
            flags |= khop_mask(topology, v, region_hops).flags
    for v in anchor_map:
        flags[v] = False
    return RegionMask(flags, anchor_map)


def edit_with_anchors(
    mesh: MeshSample,
    anchors: list,
    region_hops: int,
    model: EditModel,
    seed: int,
    region_vertices=None,
    progress_cb=None,
    progress_every: int = 50,
) -> tuple[MeshSample, RegionMask]:
    """Move anchors to their targets and resample their surrounding region.

    ``anchors`` is a list of (vertex, target) pairs. The region is the
    union of k-hop neighborhoods of the anchors (k = region_hops) minus the
    anchors themselves, or an explicit ``region_vertices`` set. Anchor
    vertices land exactly on their targets; everything outside the region
    is preserved bit-exactly.
    """
    mask = anchor_region_mask(model.topology, anchors, region_hops, region_vertices)
    flags, anchor_map = mask.flags, mask.anchors

    cond = _apply_anchors(mesh.positions, anchor_map)
    if not flags.any():
        return MeshSample(cond), mask
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = model.sample_batch(
        cond[None], mask, rng, progress_cb=progress_cb, progress_every=progress_every
    )[0]
    return MeshSample(out), mask


def swap_mask(topology: TemplateTopology, region, mesh_b: MeshSample) -> RegionMask:
    """Mask for region swapping: anchors are the interior of the region
    (two or more hops in from the region boundary) pinned to B's positions;
    the remaining region vertices form the generated blend ring. Falls back
    to a one-hop interior for thin regions and errors only if even that is
    empty."""
    region = np.asarray(sorted(set(int(v) for v in region)), dtype=np.int64)
    if region.size == 0:
        raise ConfigError("region is empty")
    n = topology.vertex_count
    in_region = np.zeros(n, dtype=bool)
    in_region[region] = True
    outside = np.flatnonzero(~in_region)
    if outside.size == 0:
        raise ConfigError("region covers the whole mesh; nothing to condition on")
    # hop distance to the nearest outside vertex; the region boundary layer is 1
    dist_out = topology.hop_distances(outside)
    interior = np.flatnonzero(in_region & (dist_out >= 3))
    if interior.size == 0:
        interior = np.flatnonzero(in_region & (dist_out >= 2))
    if interior.size == 0:
        raise ConfigError("region too thin: no interior vertices to anchor the swap")
    anchor_map = {int(v): mesh_b.positions[v].copy() for v in interior}
    flags = in_region.copy()
    flags[interior] = False
    return RegionMask(flags, anchor_map)


def swap_region(
    mesh_a: MeshSample,
    mesh_b: MeshSample,
    region,
    model: EditModel,
    seed: int,
    progress_cb=None,
    progress_every: int = 50,
) -> tuple[MeshSample, RegionMask]:
    """Carry mesh B's geometry of ``region`` onto mesh A with a generated blend."""
    n = model.topology.vertex_count
    if mesh_a.vertex_count != n or mesh_b.vertex_count != n:
        raise TopologyMismatch("both meshes must live on the model's template")
    mask = swap_mask(model.topology, region, mesh_b)
    anchor_map = mask.anchors

    cond = _apply_anchors(mesh_a.positions, anchor_map)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = model.sample_batch(
        cond[None], mask, rng, progress_cb=progress_cb, progress_every=progress_every
    )[0]
    return MeshSample(out), mask


def reconstruct_from_points(
    anchors: list, model: EditModel, seed: int, progress_cb=None, progress_every: int = 50
) -> MeshSample:
    """Generate a full shape through sparse anchor constraints.

    The base mesh is the template mean shape; every non-anchor vertex is
    masked, so the anchors fully determine the conditioning.
    """
    if not anchors:
        raise ConfigError("need at least one anchor")
    anchor_map = {int(v): np.asarray(t, dtype=np.float64) for v, t in anchors}
    flags = np.ones(model.topology.vertex_count, dtype=bool)
    for v in anchor_map:
        flags[v] = False
    mask = RegionMask(flags, anchor_map)
    cond = _apply_anchors(model.mean_shape, anchor_map)
    if not flags.any():
        return MeshSample(cond)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out = model.sample_batch(
        cond[None], mask, rng, progress_cb=progress_cb, progress_every=progress_every
    )[0]
    return MeshSample(out)


def sample_global(model: EditModel, n: int, seed: int, progress_cb=None,
                  progress_every: int = 50) -> list:
    """Unconditional draws: every vertex masked, empty anchor set."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    mask = full_mask(model.topology)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cond = np.repeat(model.mean_shape[None], n, axis=0)
    out = model.sample_batch(cond, mask, rng, progress_cb=progress_cb,
                             progress_every=progress_every)
    return [MeshSample(out[i]) for i in range(n)]


def farthest_point_indices(positions: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of the vertices (Euclidean)."""
    pos = np.asarray(positions, dtype=np.float64)
    if not 1 <= n <= len(pos):
        raise ConfigError("n must be in [1, vertex_count]")
    chosen = [int(start)]
    d = np.linalg.norm(pos - pos[start], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(pos - pos[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# region/anchor specification files


def parse_region_spec(obj: dict, vertex_count: int):
    """Validate {"anchors": [{vertex, target?}], "region": {"hops": k} | {"vertices": [...]}}.

    Returns (anchors: list of (vertex, target-or-None), region dict or None).
    """
    if not isinstance(obj, dict):
        raise ConfigError("region spec must be a JSON object")
    anchors = []
    for item in obj.get("anchors", []):
        if "vertex" not in item:
            raise ConfigError("anchor entry missing 'vertex'")
        v = int(item["vertex"])
        if not 0 <= v < vertex_count:
            raise ConfigError(f"anchor vertex {v} out of range")
        target = item.get("target")
        if target is not None:
            target = np.asarray(target, dtype=np.float64)
            if target.shape != (3,) or not np.isfinite(target).all():
                raise ConfigError(f"anchor {v} target must be a finite [x, y, z]")
        anchors.append((v, target))
    region = obj.get("region")
    if region is not None:
        if "hops" in region:
            region = {"hops": int(region["hops"])}
        elif "vertices" in region:
            verts = [int(v) for v in region["vertices"]]
            for v in verts:
                if not 0 <= v < vertex_count:
                    raise ConfigError(f"region vertex {v} out of range")
            region = {"vertices": verts}
        else:
            raise ConfigError("region must specify 'hops' or 'vertices'")
    return anchors, region


def load_region_spec(path, vertex_count: int):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return parse_region_spec(obj, vertex_count)
