"""Quantitative metrics: region-sampling diversity, PCA-space Fréchet
distance, and identity preservation, plus the PCA shape model they need.

Metric conventions (model units are mm):
  DIV  mean squared vertex displacement (mm^2) between region resamplings
       and the original region; higher = more diverse.
  FID  Fréchet distance between Gaussians fitted to PCA codes of real and
       generated/manipulated meshes; lower = more realistic.
  ID   mean per-subject squared PCA-code displacement after a region
       manipulation; lower = identity better preserved.

``sampler`` arguments are callables (mesh, mask, seed) -> mesh so the
metrics can be exercised against a trivial copy-model oracle as well as a
trained diffusion model.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .mesh import MaskConfig, MeshSample, RegionMask, TemplateTopology, khop_mask


@dataclass
class PcaModel:
    mean: np.ndarray  # (3N,)
    components: np.ndarray  # (K, 3N), orthonormal rows, decreasing variance
    explained_variance: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.components.shape[0]

    def project(self, meshes) -> np.ndarray:
        X = _flatten(meshes)
        return (X - self.mean[None]) @ self.components.T

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        flat = self.mean[None] + codes @ self.components
        return flat.reshape(len(codes), -1, 3)


def _flatten(meshes) -> np.ndarray:
    if isinstance(meshes, np.ndarray) and meshes.ndim == 3:
        return meshes.reshape(len(meshes), -1).astype(np.float64)
    rows = []
    for m in meshes:
        pos = m.positions if isinstance(m, MeshSample) else np.asarray(m)
        rows.append(pos.ravel())
    return np.asarray(rows, dtype=np.float64)


def fit_pca(meshes, K: int) -> PcaModel:
    """Standard PCA on flattened vertices with a deterministic sign convention
    (the largest-magnitude entry of each component is made positive)."""
    X = _flatten(meshes)
    n, d = X.shape
    if K < 1:
        raise ConfigError("K must be >= 1")
    if n < K + 1:
        raise ConfigError(f"need at least K+1={K + 1} meshes, got {n}")
    if K > min(n - 1, d):
        raise ConfigError(f"K={K} exceeds the sample rank bound {min(n - 1, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean[None]
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:K]
    var = (s[:K] ** 2) / (n - 1)
    for i in range(K):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaModel(mean=mean, components=comps, explained_variance=var)


def pick_pca_dim(meshes, variance_target: float = 0.99, cap: int = 64) -> int:
    """Smallest K explaining ``variance_target`` of the variance, capped."""
    X = _flatten(meshes)
    Xc = X - X.mean(axis=0, keepdims=True)
    s = np.linalg.svd(Xc, compute_uv=False)
    var = s**2
    total = var.sum()
    if total <= 0:
        return 1
    frac = np.cumsum(var) / total
    K = int(np.searchsorted(frac, variance_target) + 1)
    return max(1, min(K, cap, len(X) - 1))


def _sqrtm_psd(mat: np.ndarray, clip_tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < -clip_tol * max(1.0, float(vals.max())):
        raise ConfigError("matrix is significantly non-PSD; cannot take square root")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[None, :]) @ vecs.T


def frechet_pca(real_codes: np.ndarray, generated_codes: np.ndarray) -> float:
    """Squared Fréchet distance between Gaussians fitted to two code sets.

    d^2 = |mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the
    matrix square root computed through the symmetrized product
    S_r^{1/2} S_g S_r^{1/2}; slightly negative eigenvalues from roundoff
    are clipped to zero.
    """
    a = np.asarray(real_codes, dtype=np.float64)
    b = np.asarray(generated_codes, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError("code sets must be 2-D with equal dimension")
    if len(a) < 2 or len(b) < 2:
        raise ConfigError("need at least 2 samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    cb = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])
    if not (np.isfinite(ca).all() and np.isfinite(cb).all()):
        raise ConfigError("non-finite covariance")
    sa = _sqrtm_psd(ca)
    cross = _sqrtm_psd(sa @ cb @ sa)
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    if d2 < 0:
        if d2 < -1e-8:
            raise ConfigError(f"Fréchet distance came out negative ({d2:.3g})")
        d2 = 0.0
    return d2


def metric_regions(
    topology: TemplateTopology, n_regions: int, seed: int, mask_cfg: MaskConfig
) -> list:
    """Seeded random manipulation regions drawn like training masks but never full-shape."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10,)))
    regions = []
    for _ in range(n_regions):
        anchor = int(rng.integers(0, topology.vertex_count))
        k = int(rng.integers(1, mask_cfg.k_max + 1))
        regions.append(khop_mask(topology, anchor, k))
    return regions


def diversity(
    sampler,
    test_meshes: np.ndarray,
    topology: TemplateTopology,
    mask_cfg: MaskConfig,
    n_regions: int = 5,
    n_samples: int = 10,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Mean squared vertex error (mm^2) between region resamplings and the
    original region, averaged over samples, regions, and subjects.

    Returns (DIV, per-subject values).
    """
    regions = metric_regions(topology, n_regions, seed, mask_cfg)
    per_subject = np.zeros(len(test_meshes))
    for si, mesh in enumerate(test_meshes):
        orig = np.asarray(mesh, dtype=np.float64)
        acc = []
        for ri, mask in enumerate(regions):
            idx = mask.masked_indices()
            for k in range(n_samples):
                out = sampler(MeshSample(orig), mask, seed * 1_000_003 + si * 1009 + ri * 101 + k)
                d = out.positions[idx] - orig[idx]
                acc.append(float((d**2).sum(axis=1).mean()))
        per_subject[si] = float(np.mean(acc))
    return float(per_subject.mean()), per_subject


def identity_preservation(
    sampler,
    test_meshes: np.ndarray,
    pca: PcaModel,
    topology: TemplateTopology,
    mask_cfg: MaskConfig,
    n_regions: int = 5,
    seed: int = 0,
    return_codes: bool = False,
):
    """Mean per-subject squared PCA-code distance between each mesh and its
    random-region manipulations. Returns (ID, per-subject values) and, with
    ``return_codes``, also the manipulated meshes' codes for FID reuse."""
    regions = metric_regions(topology, n_regions, seed, mask_cfg)
    per_subject = np.zeros(len(test_meshes))
    manipulated_codes = []
    for si, mesh in enumerate(test_meshes):
        orig = np.asarray(mesh, dtype=np.float64)
        code0 = pca.project(orig[None])[0]
        acc = []
        for ri, mask in enumerate(regions):
            out = sampler(MeshSample(orig), mask, seed * 2_000_003 + si * 1013 + ri * 103)
            code1 = pca.project(out.positions[None])[0]
            manipulated_codes.append(code1)
            acc.append(float(((code1 - code0) ** 2).mean()))
        per_subject[si] = float(np.mean(acc))
    if return_codes:
        return float(per_subject.mean()), per_subject, np.asarray(manipulated_codes)
    return float(per_subject.mean()), per_subject


def copy_sampler(mesh: MeshSample, mask: RegionMask, seed: int) -> MeshSample:
    """Degenerate model that reproduces its input; DIV and ID oracles are 0."""
    return mesh.copy()


def model_sampler(model):
    """Adapt an :class:`meshsculpt.editing.EditModel` to the metric interface."""
    from .editing import sample_region

    def fn(mesh: MeshSample, mask: RegionMask, seed: int) -> MeshSample:
        return sample_region(mesh, mask, 1, model, seed)[0]

    return fn


# ---------------------------------------------------------------------------
# report output


def write_report(
    out_path,
    div: float,
    fid: float,
    id_: float,
    config: dict,
    seed: int,
    n_subjects: int,
    per_subject_rows=None,
    figures_dir=None,
) -> dict:
    """Write the metrics JSON (plus optional per-subject CSV and figures)."""
    report = {
        "div": div,
        "fid": fid,
        "id": id_,
        "config": config,
        "seed": seed,
        "n_subjects": n_subjects,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if per_subject_rows is not None:
        csv_path = os.path.splitext(str(out_path))[0] + "_per_subject.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject", "div", "id"])
            for row in per_subject_rows:
                writer.writerow(row)
    if figures_dir is not None:
        os.makedirs(figures_dir, exist_ok=True)
        _metrics_figure(os.path.join(figures_dir, "metrics.png"), div, fid, id_)
    return report


def _metrics_figure(path, div, fid, id_) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(7.5, 3))
    for ax, (name, value) in zip(
        axes, [("DIV (mm$^2$)", div), ("PCA-FID", fid), ("ID", id_)]
    ):
        ax.bar([0], [value], width=0.5, color="tab:blue")
        ax.set_xticks([])
        ax.set_title(f"{name}\n{value:.4g}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def reconstruction_trend_figure(path, anchor_counts, errors) -> None:
    """Reconstruction error vs. number of anchors (expected to decrease)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(anchor_counts, errors, marker="o")
    ax.set_xlabel("anchor points")
    ax.set_ylabel("mean vertex error (mm)")
    ax.set_xscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
