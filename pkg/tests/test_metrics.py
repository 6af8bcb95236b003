import csv
import json
import os

import numpy as np
import pytest

from meshsculpt.errors import ConfigError
from meshsculpt.mesh import MaskConfig
from meshsculpt.metrics import (
    copy_sampler,
    diversity,
    fit_pca,
    frechet_pca,
    identity_preservation,
    metric_regions,
    pick_pca_dim,
    write_report,
)
from meshsculpt.primitives import make_sphere
from meshsculpt.training import generate_toy_dataset


@pytest.fixture(scope="module")
def toy():
    topo, ref = make_sphere(8, 10, (95.0, 80.0, 100.0))
    ds = generate_toy_dataset(topo, ref, K=4, n_samples=60, n_test=10, seed=5, noise_std=0.0)
    return topo, ref, ds


# ---------------------------------------------------------------------------
# PCA


def test_pca_identical_meshes_zero_variance(toy):
    topo, ref, _ = toy
    meshes = np.repeat(ref.positions[None], 6, axis=0)
    pca = fit_pca(meshes, 3)
    assert np.allclose(pca.explained_variance, 0.0, atol=1e-18)


def test_pca_recovers_toy_subspace(toy):
    topo, ref, ds = toy
    pca = fit_pca(ds.train, ds.model.K)
    B = ds.model.basis.reshape(ds.model.K, -1)
    C = pca.components
    # principal angles between the two K-dim subspaces
    s = np.linalg.svd(B @ C.T, compute_uv=False)
    angles = np.arccos(np.clip(s, -1, 1))
    assert angles.max() < 1e-3


def test_pca_full_rank_reconstruction(toy):
    topo, ref, ds = toy
    X = ds.train[:20]
    K = min(len(X) - 1, 19)
    pca = fit_pca(X, K)
    rec = pca.reconstruct(pca.project(X))
    assert np.abs(rec - X).max() < 1e-5


def test_pca_sign_convention_deterministic(toy):
    topo, ref, ds = toy
    a = fit_pca(ds.train, 3)
    b = fit_pca(ds.train, 3)
    assert np.array_equal(a.components, b.components)
    for comp in a.components:
        assert comp[np.argmax(np.abs(comp))] > 0


def test_pca_rank_errors(toy):
    topo, ref, ds = toy
    with pytest.raises(ConfigError, match="K\\+1"):
        fit_pca(ds.train[:3], 3)
    with pytest.raises(ConfigError):
        fit_pca(ds.train, 0)


def test_pick_pca_dim(toy):
    topo, ref, ds = toy
    K = pick_pca_dim(ds.train)
    assert 1 <= K <= 64
    assert K >= ds.model.K  # needs at least the true modes for 99% variance


# ---------------------------------------------------------------------------
# Fréchet distance


def test_frechet_identical_sets_zero():
    rng = np.random.default_rng(0)
    codes = rng.standard_normal((40, 5))
    assert frechet_pca(codes, codes.copy()) == pytest.approx(0.0, abs=1e-6)


def test_frechet_univariate_closed_form():
    # sample sets engineered to have exactly mean 0 var 1 and mean 1 var 4
    a = np.array([[-np.sqrt(0.5)], [np.sqrt(0.5)]])
    b = np.array([[1.0 - np.sqrt(2.0)], [1.0 + np.sqrt(2.0)]])
    d2 = frechet_pca(a, b)
    assert d2 == pytest.approx(2.0, abs=1e-9)


def test_frechet_symmetry_and_nonnegativity():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.standard_normal((30, 4))
        b = rng.standard_normal((30, 4)) * 1.3 + 0.2
        dab = frechet_pca(a, b)
        dba = frechet_pca(b, a)
        assert abs(dab - dba) < 1e-9
        assert dab >= 0
    assert frechet_pca(a, a + 1e-9) >= 0


def test_frechet_input_validation():
    with pytest.raises(ConfigError):
        frechet_pca(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ConfigError):
        frechet_pca(np.zeros((5, 3)), np.zeros((5, 4)))
    with pytest.raises(ConfigError):
        frechet_pca(np.full((5, 3), np.nan), np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# DIV and ID


def test_copy_model_div_and_id_zero(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)
    div, per = diversity(copy_sampler, ds.test[:4], topo, cfg, n_regions=3, n_samples=2, seed=0)
    assert div == 0.0 and np.all(per == 0.0)
    pca = fit_pca(ds.train, 4)
    id_, per_id = identity_preservation(copy_sampler, ds.test[:4], pca, topo, cfg,
                                        n_regions=3, seed=0)
    assert id_ == 0.0 and np.all(per_id == 0.0)


def test_diversity_hand_computed_offsets(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)
    regions = metric_regions(topo, 2, seed=3, mask_cfg=cfg)

    def offset_sampler(mesh, mask, seed):
        out = mesh.copy()
        delta = 1.0 if seed % 2 == 0 else 2.0
        out.positions[mask.flags] += delta  # uniform shift of every masked vertex
        return out

    div, _ = diversity(offset_sampler, ds.test[:1], topo, cfg, n_regions=2, n_samples=2, seed=3)
    # per-vertex squared displacement is 3*delta^2; samples alternate delta=1,2
    seeds = [3 * 1_000_003 + 0 * 1009 + ri * 101 + k for ri in range(2) for k in range(2)]
    expected = np.mean([3.0 * (1.0 if s % 2 == 0 else 2.0) ** 2 for s in seeds])
    assert div == pytest.approx(expected, rel=1e-12)


def test_identity_hand_computed(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)
    pca = fit_pca(ds.train, 4)

    shift = np.zeros((topo.vertex_count, 3))
    shift[:10] = [1.0, 0.0, 0.0]

    def shift_sampler(mesh, mask, seed):
        out = mesh.copy()
        out.positions += shift  # ignores the mask on purpose: known code offset
        return out

    mesh = ds.test[0]
    code0 = pca.project(mesh[None])[0]
    code1 = pca.project((mesh + shift)[None])[0]
    expected = float(((code1 - code0) ** 2).mean())
    id_, per, codes = identity_preservation(shift_sampler, ds.test[:1], pca, topo, cfg,
                                            n_regions=3, seed=1, return_codes=True)
    assert id_ == pytest.approx(expected, rel=1e-9)
    assert codes.shape == (3, 4)


def test_metrics_translation_invariance(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)
    shift = np.array([10.0, -5.0, 2.0])
    pca_a = fit_pca(ds.train, 4)
    pca_b = fit_pca(ds.train + shift, 4)
    codes_a = pca_a.project(ds.test)
    codes_b = pca_b.project(ds.test + shift)
    da = np.linalg.norm(codes_a[0] - codes_a[1])
    db = np.linalg.norm(codes_b[0] - codes_b[1])
    assert abs(da - db) < 1e-6


def test_metric_regions_never_full_shape(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=3, full_mask_probability=0.0)
    for mask in metric_regions(topo, 8, seed=0, mask_cfg=cfg):
        assert 0 < mask.masked_count < topo.vertex_count
        assert len(mask.anchors) == 1


def test_metrics_deterministic(toy):
    topo, ref, ds = toy
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)

    def jitter_sampler(mesh, mask, seed):
        out = mesh.copy()
        rng = np.random.default_rng(seed)
        out.positions[mask.flags] += rng.standard_normal((mask.masked_count, 3))
        return out

    a, _ = diversity(jitter_sampler, ds.test[:2], topo, cfg, n_regions=2, n_samples=2, seed=9)
    b, _ = diversity(jitter_sampler, ds.test[:2], topo, cfg, n_regions=2, n_samples=2, seed=9)
    assert a == b


# ---------------------------------------------------------------------------
# report output


def test_write_report(tmp_path):
    out = tmp_path / "report.json"
    figs = tmp_path / "figs"
    report = write_report(
        out, div=1.5, fid=0.3, id_=0.02,
        config={"n_regions": 5}, seed=7, n_subjects=4,
        per_subject_rows=[(0, 1.4, 0.01), (1, 1.6, 0.03)],
        figures_dir=figs,
    )
    data = json.loads(out.read_text())
    assert set(data) == {"div", "fid", "id", "config", "seed", "n_subjects"}
    assert data["div"] == 1.5
    with open(tmp_path / "report_per_subject.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["subject", "div", "id"]
    assert len(rows) == 3
    assert (figs / "metrics.png").exists()
