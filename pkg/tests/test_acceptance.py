"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The toy experiment (criteria 4-6) trains a real model on a ~500-vertex
synthetic shape manifold; set MESHSCULPT_ACCEPT_CACHE to a directory to
reuse the trained run across invocations while iterating.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import networkx as nx
import pytest

from meshsculpt.cli import _load_model
from meshsculpt.denoiser import (
    DenoiserConfig,
    DenoiserPlan,
    backward_batch,
    forward_batch,
    init_params,
)
from meshsculpt.diffusion import closed_form_diffuse, forward_step, make_schedule
from meshsculpt.editing import (
    edit_with_anchors,
    farthest_point_indices,
    reconstruct_from_points,
    sample_global,
    sample_region,
    swap_region,
)
from meshsculpt.hierarchy import build_hierarchy, compute_spirals
from meshsculpt.mesh import (
    MaskConfig,
    MeshSample,
    RegionMask,
    TemplateTopology,
    khop_mask,
    load_obj,
)
from meshsculpt.metrics import (
    copy_sampler,
    diversity,
    fit_pca,
    frechet_pca,
    identity_preservation,
    metric_regions,
    model_sampler,
    pick_pca_dim,
)
from meshsculpt.primitives import make_icosahedron, make_sphere
from meshsculpt.training import (
    TrainConfig,
    generate_toy_dataset,
    load_dataset,
    save_dataset,
    train,
)

CACHE_ENV = "MESHSCULPT_ACCEPT_CACHE"


def announce(num, name, ok=True):
    print(f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'}", file=sys.__stdout__)
    sys.__stdout__.flush()


def _bundle_dir(tmp_path_factory, name):
    cache = os.environ.get(CACHE_ENV)
    if cache:
        p = Path(cache) / name
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp(name)


# ---------------------------------------------------------------------------
# toy experiment fixtures

TOY = dict(rows=22, cols=24, radii=(95.0, 80.0, 100.0), K=12, sigma0=45.0,
           decay=0.85, noise_std=0.8, n_train=2000, n_test=400, data_seed=7)
# 2000/8 = 250 steps/epoch -> 20,000 steps; base_lr 3e-3: the 1e-2 default
# destabilizes Adam at this batch size and mesh scale (see decisions ledger)
TOY_TRAIN = dict(epochs=80, batch_size=8, T=100, beta_start=1e-3, beta_end=0.2,
                 seed=0, base_lr=3e-3)

SMALL = dict(rows=10, cols=10, radii=(95.0, 80.0, 100.0), K=6, sigma0=25.0,
             decay=0.85, noise_std=0.8, n_train=400, n_test=60, data_seed=3)
SMALL_TRAIN = dict(epochs=60, batch_size=16, T=50, beta_start=2e-3, beta_end=0.32,
                   seed=0)  # 25 steps/epoch -> 1,500 steps


def _prepare_run(base: Path, spec: dict, train_spec: dict):
    ds_dir = base / "data"
    run_dir = base / "run"
    if not (run_dir / "final.sfd").exists():
        topo, template = make_sphere(spec["rows"], spec["cols"], spec["radii"])
        ds = generate_toy_dataset(
            topo, template, K=spec["K"], n_samples=spec["n_train"],
            n_test=spec["n_test"], seed=spec["data_seed"], sigma0=spec["sigma0"],
            decay=spec["decay"], noise_std=spec["noise_std"],
        )
        save_dataset(ds_dir, ds)
        cfg = TrainConfig(**train_spec)
        hier = build_hierarchy(ds.topology, MeshSample(ds.model.mean_shape),
                               cfg.levels, cfg.ratios, cfg.spiral_length)
        t0 = time.monotonic()
        train(ds.train, ds.topology, hier, cfg, run_dir)
        (base / "train_seconds.txt").write_text(f"{time.monotonic() - t0:.1f}\n")
    dataset = load_dataset(ds_dir)
    model, topo, _ = _load_model(run_dir / "final.sfd", ds_dir / "template.obj")
    seconds = float((base / "train_seconds.txt").read_text())
    with open(run_dir / "log.ndjson") as fh:
        records = [json.loads(line) for line in fh]
    losses_by_epoch = {}
    for r in records:
        losses_by_epoch.setdefault(r["epoch"], []).append(r["loss"])
    epoch_losses = [float(np.mean(losses_by_epoch[e])) for e in sorted(losses_by_epoch)]
    return dataset, model, epoch_losses, seconds, len(records)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return _prepare_run(_bundle_dir(tmp_path_factory, "toy506"), TOY, TOY_TRAIN)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    return _prepare_run(_bundle_dir(tmp_path_factory, "small92"), SMALL, SMALL_TRAIN)


# ---------------------------------------------------------------------------
# criterion 1: localization guarantee, zero tolerance


def test_criterion_1_localization(small):
    dataset, model, _, _, _ = small
    topo = model.topology
    n = topo.vertex_count
    meshes = dataset.test
    rng = np.random.default_rng(20260809)
    t0 = time.monotonic()

    calls = 0
    while calls < 1000:
        op = calls % 3
        base = MeshSample(meshes[rng.integers(len(meshes))].copy())
        seed = int(rng.integers(2**31))
        if op == 0:  # region sampling
            anchor = int(rng.integers(n))
            k = int(rng.integers(1, 5))
            mask = khop_mask(topo, anchor, k)
            out = sample_region(base, mask, 1, model, seed)[0]
            cond = base.positions
            allowed = mask.flags
        elif op == 1:  # anchor edit
            n_anchors = int(rng.integers(1, 4))
            verts = rng.choice(n, size=n_anchors, replace=False)
            anchors = [(int(v), base.positions[v] + rng.normal(0, 3.0, 3)) for v in verts]
            hops = int(rng.integers(1, 4))
            out, mask = edit_with_anchors(base, anchors, hops, model, seed)
            cond = base.positions.copy()
            for v, tgt in anchors:
                cond[v] = tgt
            allowed = mask.flags
        else:  # region swap
            donor = MeshSample(meshes[rng.integers(len(meshes))].copy())
            center = int(rng.integers(n))
            k = int(rng.integers(2, 4))
            region = khop_mask(topo, center, k).masked_indices().tolist() + [center]
            out, mask = swap_region(base, donor, region, model, seed)
            cond = base.positions.copy()
            for v, tgt in mask.anchors.items():
                cond[v] = tgt
            allowed = mask.flags
        changed = np.any(out.positions != cond, axis=1)
        assert not np.any(changed & ~allowed), "changed vertex outside the mask"
        assert np.array_equal(out.positions[~allowed], cond[~allowed])
        calls += 1

    elapsed = time.monotonic() - t0
    assert elapsed < 600, f"localization sweep took {elapsed:.0f}s (budget 600s)"
    announce(1, f"localization ({calls} calls, {elapsed:.0f}s, zero mismatches)")


def test_zero_displacement_edit_stays_within_sampling_spread(small):
    # editing invariant: pinning an anchor at its current position and
    # resampling its region must not move the region further than ordinary
    # region sampling does
    dataset, model, _, _, _ = small
    mesh = MeshSample(dataset.test[0].copy())
    anchor = 40
    out, mask = edit_with_anchors(
        mesh, [(anchor, mesh.positions[anchor].copy())], 2, model, seed=5
    )
    idx = mask.masked_indices()
    edit_dist = float(np.linalg.norm(out.positions[idx] - mesh.positions[idx], axis=1).mean())
    spread = []
    for k, s in enumerate(sample_region(mesh, mask, 8, model, seed=99)):
        spread.append(float(np.linalg.norm(s.positions[idx] - mesh.positions[idx], axis=1).mean()))
    assert edit_dist <= 2.0 * max(spread)


# ---------------------------------------------------------------------------
# criterion 2: forward-process correctness, 1e5 trials, within 1%


def test_criterion_2_forward_process():
    t0 = time.monotonic()
    schedule = make_schedule(1000, 1e-4, 0.02)
    trials = 100_000
    x0 = np.array([0.7, -1.3, 2.1])
    base = MeshSample(np.repeat(x0[None], trials, axis=0))
    mask = RegionMask(np.ones(trials, dtype=bool), {})
    rng = np.random.default_rng(20260809)

    checkpoints = {1, 10, 100, 1000}
    chain_stats = {}
    x = base
    for t in range(1, 1001):
        x = forward_step(x, t, mask, schedule, rng.standard_normal((trials, 3)))
        if t in checkpoints:
            chain_stats[t] = (x.positions.mean(axis=0), x.positions.std(axis=0))

    for t in sorted(checkpoints):
        cf = closed_form_diffuse(base, t, mask, schedule,
                                 rng.standard_normal((trials, 3)))
        cf_mean = cf.positions.mean(axis=0)
        cf_std = cf.positions.std(axis=0)
        exact_mean = np.sqrt(schedule.alpha_bar[t - 1]) * x0
        exact_std = np.sqrt(1 - schedule.alpha_bar[t - 1])
        # 1% tolerance on the process scale: the mean shrinks to ~6e-3 by
        # t=1000 while the spread is ~1, so a pure relative-mean check would
        # need ~1e8 trials; max(|mean|, std) is the attainable reading
        scale = max(np.abs(exact_mean).max(), exact_std)
        ch_mean, ch_std = chain_stats[t]
        for got_mean, got_std in ((ch_mean, ch_std), (cf_mean, cf_std)):
            assert np.abs(got_mean - exact_mean).max() <= 0.01 * scale, f"mean off at t={t}"
            assert np.abs(got_std - exact_std).max() <= 0.01 * exact_std, f"std off at t={t}"
        assert np.abs(ch_mean - cf_mean).max() <= 0.02 * scale
        assert np.abs(ch_std - cf_std).max() <= 0.02 * exact_std

    elapsed = time.monotonic() - t0
    assert elapsed < 120, f"forward-process check took {elapsed:.0f}s (budget 120s)"
    announce(2, f"forward process ({trials} trials, t in {{1,10,100,1000}}, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 3: gradient correctness on a 12-vertex mesh


def test_criterion_3_gradients():
    t0 = time.monotonic()
    topo, ref = make_icosahedron()
    hier = build_hierarchy(topo, ref, 3, (1.0, 0.5, 0.34), spiral_length=5)
    cfg = DenoiserConfig(hidden=12, layers=4, embed_dim=16, t_freqs=8, t_dim=8)
    rng = np.random.default_rng(1)
    params = init_params(cfg, hier, rng, dtype=np.float64)
    plan = DenoiserPlan(hier)
    x = rng.standard_normal((12, 3))
    mask = (rng.random(12) < 0.5).astype(np.float64)
    t_step = 5

    eps, cache = forward_batch(x[None], [t_step], mask[None], params, plan, keep_cache=True)
    upstream = rng.standard_normal(eps.shape)
    grads, dX = backward_batch(params, plan, cache, upstream)

    def loss_at(p, xx):
        e, _ = forward_batch(xx[None], [t_step], mask[None], p, plan)
        return float((e * upstream[0][None]).sum())

    h = 1e-5
    worst = 0.0
    checked = 0
    for name in sorted(params.tensors):
        flat = params.tensors[name].ravel()
        g = grads[name].ravel()
        if flat.size <= 64:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=128, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at(params, x)
            flat[i] = orig - h
            lm = loss_at(params, x)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - g[i]) / max(1.0, abs(fd), abs(g[i]))
            assert rel < 1e-4, f"{name}[{i}]: rel err {rel:.2e}"
            worst = max(worst, rel)
            checked += 1
    for v in range(12):
        for c in range(3):
            orig = x[v, c]
            x[v, c] = orig + h
            lp = loss_at(params, x)
            x[v, c] = orig - h
            lm = loss_at(params, x)
            x[v, c] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - dX[0, v, c]) / max(1.0, abs(fd), abs(dX[0, v, c]))
            assert rel < 1e-4
            worst = max(worst, rel)
            checked += 1

    elapsed = time.monotonic() - t0
    assert elapsed < 60, f"gradient check took {elapsed:.0f}s (budget 60s)"
    announce(3, f"gradients ({checked} entries over every tensor, worst rel err {worst:.1e})")


# ---------------------------------------------------------------------------
# criterion 4: toy training convergence


def test_criterion_4_training_convergence(toy):
    dataset, model, epoch_losses, seconds, n_steps = toy
    assert n_steps == 20_000
    assert model.topology.vertex_count == 506
    ratio = epoch_losses[-1] / epoch_losses[0]
    assert ratio < 0.1, f"loss ratio {ratio:.3f} (first {epoch_losses[0]:.4f}, final {epoch_losses[-1]:.4f})"
    assert seconds < 7200, f"training took {seconds:.0f}s (budget 2h)"
    announce(4, f"training convergence (loss {epoch_losses[0]:.3f} -> {epoch_losses[-1]:.4f}, "
                f"ratio {ratio:.3f}, {seconds:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 5: generative quality on the toy manifold


def test_criterion_5_generative_quality(toy):
    dataset, model, _, _, _ = toy
    topo = model.topology
    heldout = dataset.test[:200]

    samples = sample_global(model, 200, seed=11)
    sampled = np.stack([m.positions for m in samples])

    # sanity envelope: all samples inside 5 mean-shape radii
    radius = np.linalg.norm(model.mean_shape - model.norm.center, axis=1).max()
    assert np.isfinite(sampled).all()
    assert np.linalg.norm(sampled - model.norm.center, axis=2).max() < 5 * radius

    resid_samples = dataset.model.projection_residual(sampled).mean()
    resid_heldout = dataset.model.projection_residual(heldout).mean()
    assert resid_samples <= 2.0 * resid_heldout, (
        f"sample residual {resid_samples:.3f}mm vs held-out {resid_heldout:.3f}mm"
    )

    # region-sampling diversity vs the dataset's own within-region spread
    mask_cfg = MaskConfig(k_max=model.k_max, full_mask_probability=0.0)
    div, _ = diversity(model_sampler(model), dataset.test[:5], topo, mask_cfg,
                       n_regions=5, n_samples=10, seed=21)
    regions = metric_regions(topo, 5, seed=21, mask_cfg=mask_cfg)
    spreads = []
    for mask in regions:
        idx = mask.masked_indices()
        spreads.append(float(dataset.train[:, idx, :].std(axis=0).mean()))
    sigma_region = float(np.mean(spreads))
    # DIV is a squared quantity (mm^2); compare on the mm scale
    assert math.sqrt(div) > 0.1 * sigma_region, (
        f"sqrt(DIV) {math.sqrt(div):.3f}mm vs 0.1*sigma {0.1 * sigma_region:.3f}mm"
    )

    K = pick_pca_dim(dataset.train)
    pca = fit_pca(dataset.train, K)
    codes_heldout = pca.project(heldout)
    fid_samples = frechet_pca(codes_heldout, pca.project(sampled))
    mean_copies = np.repeat(model.mean_shape[None], 200, axis=0)
    fid_mean = frechet_pca(codes_heldout, pca.project(mean_copies))
    assert fid_samples < fid_mean, f"FID {fid_samples:.3f} !< mean-copy FID {fid_mean:.3f}"

    announce(5, f"generative quality (residual {resid_samples:.2f}<=2x{resid_heldout:.2f}mm, "
                f"sqrt(DIV) {math.sqrt(div):.2f}mm, FID {fid_samples:.2f} < {fid_mean:.2f})")


# ---------------------------------------------------------------------------
# criterion 6: sparse reconstruction trend


def test_criterion_6_reconstruction_trend(toy):
    dataset, model, _, _, _ = toy
    subjects = dataset.test[200:220]
    assert len(subjects) == 20
    counts = [50, 100, 200, 400]
    errors = []
    for n_anchors in counts:
        errs = []
        for si, gt in enumerate(subjects):
            idx = farthest_point_indices(gt, n_anchors)
            anchors = [(int(v), gt[v]) for v in idx]
            out = reconstruct_from_points(anchors, model, seed=1000 + si)
            errs.append(float(np.linalg.norm(out.positions - gt, axis=1).mean()))
        errors.append(float(np.mean(errs)))
    for a, b in zip(errors, errors[1:]):
        assert b < a, f"reconstruction error not strictly decreasing: {errors}"
    announce(6, "reconstruction trend (mm): " +
                " > ".join(f"{e:.3f}" for e in errors))


# ---------------------------------------------------------------------------
# criterion 7: metric oracles


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(0)
    codes = rng.standard_normal((64, 6))
    assert abs(frechet_pca(codes, codes.copy())) <= 1e-6

    a = np.array([[-np.sqrt(0.5)], [np.sqrt(0.5)]])
    b = np.array([[1.0 - np.sqrt(2.0)], [1.0 + np.sqrt(2.0)]])
    assert frechet_pca(a, b) == pytest.approx(2.0, abs=1e-9)

    topo, ref = make_sphere(8, 10, (95.0, 80.0, 100.0))
    ds = generate_toy_dataset(topo, ref, K=4, n_samples=30, n_test=6, seed=5)
    cfg = MaskConfig(k_max=2, full_mask_probability=0.0)
    div, _ = diversity(copy_sampler, ds.test[:3], topo, cfg, n_regions=3, n_samples=3, seed=0)
    pca = fit_pca(ds.train, 4)
    id_, _ = identity_preservation(copy_sampler, ds.test[:3], pca, topo, cfg,
                                   n_regions=3, seed=0)
    assert div == 0.0
    assert id_ == 0.0
    announce(7, "metric oracles (frechet 0 and 2.0, copy-model DIV=ID=0)")


# ---------------------------------------------------------------------------
# criterion 8: hierarchy and spiral oracles


def _random_mesh(rng):
    rows = int(rng.integers(5, 10))
    cols = int(rng.integers(5, 12))
    radii = 50.0 + 60.0 * rng.random(3)
    topo, ref = make_sphere(rows, cols, tuple(radii))
    jitter = rng.normal(0, 0.02 * float(np.mean(radii)), ref.positions.shape)
    return topo, MeshSample(ref.positions + jitter)


def test_criterion_8_hierarchy_and_masks():
    rng = np.random.default_rng(88)
    for i in range(50):
        topo, ref = _random_mesh(rng)
        h = build_hierarchy(topo, ref, 3, (1.0, 0.5, 0.25), spiral_length=7)
        assert h.check_nesting(), f"nesting violated on random mesh {i}"
        for lvl in h.levels:
            assert np.array_equal(lvl.spirals[:, 0], np.arange(lvl.size))
            assert np.allclose(lvl.up_weight.sum(axis=1), 1.0, atol=1e-6)

    # hand-enumerated fans of several valences
    for n_ring in (5, 6, 7):
        ring = [(np.cos(2 * np.pi * j / n_ring), np.sin(2 * np.pi * j / n_ring), 0.0)
                for j in range(n_ring)]
        start = 2  # nudge the apex toward ring vertex index start+1
        apex = (0.9 * ring[start][0], 0.9 * ring[start][1], 0.2)
        verts = np.array([apex] + ring)
        faces = np.array([(0, 1 + j, 1 + (j + 1) % n_ring) for j in range(n_ring)],
                         dtype=np.int32)
        topo = TemplateTopology(n_ring + 1, faces)
        table = compute_spirals(topo, MeshSample(verts), 1 + n_ring)
        expected = [0] + [1 + (start + j) % n_ring for j in range(n_ring)]
        assert table[0].tolist() == expected

    # 100 random (mesh, anchor, k) triples against a BFS oracle
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(10):
        topo, _ = _random_mesh(rng)
        g = nx.Graph()
        g.add_nodes_from(range(topo.vertex_count))
        g.add_edges_from(topo.edges.tolist())
        for _ in range(10):
            anchor = int(rng.integers(topo.vertex_count))
            k = int(rng.integers(0, 7))
            got = set(khop_mask(topo, anchor, k).masked_indices().tolist())
            dist = nx.single_source_shortest_path_length(g, anchor)
            want = {v for v, d in dist.items() if 1 <= d <= k}
            if got != want:
                mismatches += 1
    assert mismatches == 0
    announce(8, "hierarchy and spiral oracles (50 meshes, 3 fans, 100 BFS triples)")


# ---------------------------------------------------------------------------
# criterion 9: CLI byte-reproducibility at fixed seed, one thread


def _run_cli(*args, env_extra=None):
    env = dict(os.environ)
    env.setdefault("MPLBACKEND", "Agg")
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(
        [sys.executable, "-m", "meshsculpt.cli"] + [str(a) for a in args],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, f"{args}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
    return proc


def _pipeline_once(root: Path):
    data = root / "data"
    run = root / "run"
    _run_cli("gen-data", "--out", data, "--rows", 8, "--cols", 10, "--modes", 4,
             "--samples", 32, "--test", 6, "--noise-std", 0.5, "--seed", 3,
             "--threads", 1)
    _run_cli("hierarchy", "--mesh", data / "template.obj", "--out", root / "h.sfh",
             "--threads", 1)
    _run_cli("train", "--data", data, "--out", run, "--epochs", 2, "--batch-size", 8,
             "--T", 8, "--k-max", 2, "--seed", 0, "--threads", 1)
    _run_cli("sample", "--model", run / "final.sfd", "--template", data / "template.obj",
             "--n", 2, "--seed", 5, "--out", root / "samples", "--threads", 1)
    spec = root / "anchors.json"
    spec.write_text(json.dumps({"anchors": [{"vertex": 7, "target": [99.0, 5.0, 5.0]}],
                                "region": {"hops": 2}}))
    _run_cli("edit", "--mesh", data / "template.obj", "--anchors", spec,
             "--model", run / "final.sfd", "--out", root / "edited.obj",
             "--seed", 1, "--threads", 1)
    topo, _ = load_obj(data / "template.obj")
    region = khop_mask(topo, 20, 2).masked_indices().tolist() + [20]
    rspec = root / "region.json"
    rspec.write_text(json.dumps({"region": {"vertices": region}}))
    _run_cli("swap", "--mesh-a", data / "template.obj", "--mesh-b",
             root / "samples" / "sample_000.obj", "--region", rspec,
             "--model", run / "final.sfd", "--out", root / "swapped.obj",
             "--seed", 2, "--threads", 1)
    _run_cli("reconstruct", "--model", run / "final.sfd",
             "--template", data / "template.obj",
             "--from-mesh", data / "template.obj", "--n-anchors", 16,
             "--out", root / "recon.obj", "--seed", 4, "--threads", 1)
    _run_cli("eval", "--model", run / "final.sfd", "--data", data,
             "--out", root / "report.json", "--subjects", 2, "--n-regions", 2,
             "--n-samples", 2, "--seed", 0, "--figures", root / "figs",
             "--threads", 1)


def test_criterion_9_cli_reproducibility(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    _pipeline_once(a)
    _pipeline_once(b)
    compare = [
        "data/train.npy", "data/test.npy", "data/basis.npy", "data/template.obj",
        "h.sfh", "run/final.sfd", "run/loss_curve.png",
        "samples/sample_000.obj", "samples/sample_001.obj",
        "edited.obj", "swapped.obj", "recon.obj",
        "report.json", "report_per_subject.csv", "figs/metrics.png",
    ]
    # the NDJSON training log is excluded: its spec-required wallclock field
    # records real elapsed time
    for rel in compare:
        fa, fb = a / rel, b / rel
        assert fa.read_bytes() == fb.read_bytes(), f"{rel} differs between runs"
    announce(9, f"CLI byte-reproducibility ({len(compare)} artifacts, threads=1)")
