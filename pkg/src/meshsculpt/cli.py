"""Command-line entry point.

Thread control must happen before numpy loads its BLAS, so this module
defers all heavy imports until after flags are parsed; run it as
``meshsculpt <command>`` or ``python -m meshsculpt.cli <command>``.

Every command accepts --seed and --threads; outputs are byte-reproducible
for identical flags at --threads 1. Errors print a single machine-parsable
``error: <kind>: <message>`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys

CACHE_ENV = "SHAPEFUSION_CACHE"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS/omp worker threads; 0 = logical cores (default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshsculpt",
        description="Masked-diffusion mesh editing: train, sample, edit, evaluate, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--rows", type=int, default=22, help="template sphere rows (default 22)")
    p.add_argument("--cols", type=int, default=24, help="template sphere columns (default 24)")
    p.add_argument("--radii", default="95,80,100",
                   help="ellipsoid radii in mm as rx,ry,rz (default 95,80,100)")
    p.add_argument("--modes", type=int, default=12, help="number of deformation modes (default 12)")
    p.add_argument("--samples", type=int, default=2000, help="training samples (default 2000)")
    p.add_argument("--test", type=int, default=400, help="held-out samples (default 400)")
    p.add_argument("--noise-std", type=float, default=0.0,
                   help="iid off-manifold noise in mm (default 0)")
    p.add_argument("--mode", choices=["identity", "expression"], default="identity",
                   help="deformation style (default identity)")
    _add_common(p)

    p = sub.add_parser("hierarchy", help="build and cache the mesh hierarchy")
    p.add_argument("--mesh", required=True, help="template mesh (OBJ or PLY)")
    p.add_argument("--levels", type=int, default=3, help="hierarchy levels (default 3)")
    p.add_argument("--ratios", default="1.0,0.25,0.0625",
                   help="kept-vertex ratios per level (default 1.0,0.25,0.0625)")
    p.add_argument("--spiral-length", type=int, default=9, help="spiral length (default 9)")
    p.add_argument("--out", required=True, help="output .sfh cache file")
    _add_common(p)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate (linear decay to 0)")
    p.add_argument("--T", type=int, help="diffusion steps")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--k-max", type=int, help="max mask hop radius (0 = auto)")
    p.add_argument("--full-mask-probability", type=float)
    p.add_argument("--checkpoint-every", type=int, help="periodic checkpoint interval in epochs")
    p.add_argument("--verbose", action="store_true", help="print per-epoch loss")
    _add_common(p)

    p = sub.add_parser("sample", help="sample meshes (global, or a region of --mesh)")
    p.add_argument("--model", required=True, help="trained checkpoint (.sfd)")
    p.add_argument("--template", required=True, help="template mesh for topology")
    p.add_argument("--mesh", help="condition mesh; enables region sampling")
    p.add_argument("--region", help="region/anchor spec JSON (required with --mesh)")
    p.add_argument("--n", type=int, default=1, help="number of samples (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("edit", help="anchor-driven localized edit")
    p.add_argument("--mesh", required=True, help="input mesh")
    p.add_argument("--anchors", required=True, help="anchor/region spec JSON")
    p.add_argument("--model", required=True, help="trained checkpoint (.sfd)")
    p.add_argument("--hops", type=int, default=3,
                   help="region = k-hop union around anchors when the spec has no region (default 3)")
    p.add_argument("--out", required=True, help="output mesh path")
    _add_common(p)

    p = sub.add_parser("swap", help="swap a region from mesh B onto mesh A")
    p.add_argument("--mesh-a", required=True, help="host mesh")
    p.add_argument("--mesh-b", required=True, help="donor mesh")
    p.add_argument("--region", required=True, help="region spec JSON with explicit vertices or hops+anchors")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("reconstruct", help="reconstruct a full shape from sparse anchors")
    p.add_argument("--model", required=True)
    p.add_argument("--template", required=True, help="template mesh for topology")
    p.add_argument("--anchors", help="anchor spec JSON with targets")
    p.add_argument("--from-mesh", help="take anchors from this mesh by farthest-point sampling")
    p.add_argument("--n-anchors", type=int, default=200,
                   help="anchor count with --from-mesh (default 200)")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="compute DIV / PCA-FID / ID on a test set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset directory (train fits the PCA)")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--subjects", type=int, default=8, help="test subjects to use (default 8)")
    p.add_argument("--n-regions", type=int, default=5)
    p.add_argument("--n-samples", type=int, default=10)
    p.add_argument("--figures", help="directory for rendered figures")
    _add_common(p)

    p = sub.add_parser("serve", help="run the interactive edit service")
    p.add_argument("--model", required=True)
    p.add_argument("--template", required=True, help="template mesh for topology")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--progress-every", type=int, default=50,
                   help="reverse steps between progress messages (default 50)")
    p.add_argument("--max-jobs", type=int, default=2, help="concurrent sampling jobs (default 2)")
    p.add_argument("--undo-depth", type=int, default=32)
    _add_common(p)

    return parser


def _set_threads(n: int) -> None:
    if n <= 0:
        n = os.cpu_count() or 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_model(ckpt_path, mesh_path):
    """Load topology from the mesh, rebuild (or fetch cached) hierarchy, bind model."""
    import numpy as np

    from .denoiser import load_checkpoint, require_hash
    from .editing import EditModel
    from .hierarchy import build_hierarchy, load_hierarchy, save_hierarchy
    from .mesh import load_mesh

    topology, reference = load_mesh(mesh_path)
    _, _, ckpt_hash, extras = load_checkpoint(ckpt_path)
    require_hash(ckpt_hash, topology.content_hash())
    ratios = tuple(float(r) for r in np.atleast_1d(extras["hier.ratios"]))
    spiral_length = int(extras["hier.spiral_length"])

    hierarchy = None
    cache_dir = os.environ.get(CACHE_ENV)
    cache_path = None
    if cache_dir:
        tag = "-".join(f"{r:g}" for r in ratios)
        cache_path = os.path.join(
            cache_dir, f"{ckpt_hash:016x}_L{len(ratios)}_S{spiral_length}_{tag}.sfh"
        )
        if os.path.exists(cache_path):
            hierarchy = load_hierarchy(cache_path, expected_hash=topology.content_hash())
    if hierarchy is None:
        hierarchy = build_hierarchy(topology, reference, len(ratios), ratios, spiral_length)
        if cache_path:
            os.makedirs(cache_dir, exist_ok=True)
            save_hierarchy(cache_path, hierarchy)
    return EditModel.load(ckpt_path, topology, hierarchy), topology, reference


def run(args) -> int:
    import numpy as np

    from .mesh import load_mesh, save_mesh

    if args.command == "gen-data":
        from .primitives import make_sphere
        from .training import generate_toy_dataset, save_dataset

        radii = tuple(float(x) for x in args.radii.split(","))
        if len(radii) != 3:
            raise ValueError("--radii needs three comma-separated values")
        topo, template = make_sphere(args.rows, args.cols, radii)
        dataset = generate_toy_dataset(
            topo, template, K=args.modes, n_samples=args.samples, n_test=args.test,
            seed=args.seed, noise_std=args.noise_std, mode=args.mode,
        )
        save_dataset(args.out, dataset)
        print(f"wrote {args.samples}+{args.test} samples on {topo.vertex_count} vertices to {args.out}")
        return 0

    if args.command == "hierarchy":
        from .hierarchy import build_hierarchy, save_hierarchy

        topology, reference = load_mesh(args.mesh)
        ratios = tuple(float(x) for x in args.ratios.split(","))
        hier = build_hierarchy(topology, reference, args.levels, ratios, args.spiral_length)
        save_hierarchy(args.out, hier)
        sizes = "/".join(str(l.size) for l in hier.levels)
        print(f"hierarchy {sizes} vertices -> {args.out}")
        return 0

    if args.command == "train":
        from .hierarchy import build_hierarchy
        from .training import (TrainConfig, config_from_mapping, load_dataset,
                               parse_config_file, train)

        cfg = TrainConfig()
        if args.config:
            cfg = config_from_mapping(parse_config_file(args.config), cfg)
        overrides = {
            "epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.lr,
            "T": args.T, "beta_start": args.beta_start, "beta_end": args.beta_end,
            "k_max": args.k_max, "full_mask_probability": args.full_mask_probability,
            "checkpoint_every": args.checkpoint_every, "seed": args.seed,
        }
        cfg = config_from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
        dataset = load_dataset(args.data)
        from .mesh import MeshSample

        hier = build_hierarchy(
            dataset.topology, MeshSample(dataset.model.mean_shape),
            cfg.levels, cfg.ratios, cfg.spiral_length,
        )
        result = train(dataset.train, dataset.topology, hier, cfg, args.out,
                       resume_from=args.resume, quiet=not args.verbose)
        print(f"final epoch loss {result['epoch_losses'][-1]:.6f} -> {result['final_path']}")
        return 0

    if args.command == "sample":
        from .editing import RegionMask, load_region_spec, sample_global, sample_region

        model, topology, _ = _load_model(args.model, args.template)
        os.makedirs(args.out, exist_ok=True)
        if args.mesh:
            if not args.region:
                raise ValueError("--region is required with --mesh")
            _, mesh = load_mesh(args.mesh)
            anchors, region = load_region_spec(args.region, topology.vertex_count)
            flags = _region_flags(topology, anchors, region, default_hops=3)
            mask = RegionMask(flags, {v: t for v, t in anchors})
            outs = sample_region(mesh, mask, args.n, model, args.seed)
        else:
            outs = sample_global(model, args.n, args.seed)
        for i, m in enumerate(outs):
            save_mesh(os.path.join(args.out, f"sample_{i:03d}.obj"), topology, m)
        print(f"wrote {len(outs)} samples to {args.out}")
        return 0

    if args.command == "edit":
        from .editing import edit_with_anchors, load_region_spec

        model, topology, _ = _load_model(args.model, args.mesh)
        _, mesh = load_mesh(args.mesh)
        anchors, region = load_region_spec(args.anchors, topology.vertex_count)
        if not anchors:
            raise ValueError("anchor spec contains no anchors")
        region_vertices = None
        hops = args.hops
        if region is not None and "vertices" in region:
            region_vertices = region["vertices"]
        elif region is not None and "hops" in region:
            hops = region["hops"]
        out, _mask = edit_with_anchors(mesh, anchors, hops, model, args.seed,
                                       region_vertices=region_vertices)
        save_mesh(args.out, topology, out)
        print(f"edited mesh -> {args.out}")
        return 0

    if args.command == "swap":
        from .editing import load_region_spec, swap_region

        model, topology, _ = _load_model(args.model, args.mesh_a)
        _, mesh_a = load_mesh(args.mesh_a)
        _, mesh_b = load_mesh(args.mesh_b)
        anchors, region = load_region_spec(args.region, topology.vertex_count)
        if region is None:
            raise ValueError("swap needs a region spec")
        if "vertices" in region:
            region_set = region["vertices"]
        else:
            flags = _region_flags(topology, anchors, region, default_hops=3)
            region_set = np.flatnonzero(flags)
        out, _mask = swap_region(mesh_a, mesh_b, region_set, model, args.seed)
        save_mesh(args.out, topology, out)
        print(f"swapped region -> {args.out}")
        return 0

    if args.command == "reconstruct":
        from .editing import farthest_point_indices, load_region_spec, reconstruct_from_points

        model, topology, _ = _load_model(args.model, args.template)
        if args.anchors:
            anchors, _ = load_region_spec(args.anchors, topology.vertex_count)
            anchors = [(v, t) for v, t in anchors if t is not None]
            if not anchors:
                raise ValueError("anchor spec has no targets")
        elif args.from_mesh:
            _, gt = load_mesh(args.from_mesh)
            idx = farthest_point_indices(gt.positions, args.n_anchors)
            anchors = [(int(v), gt.positions[v]) for v in idx]
        else:
            raise ValueError("need --anchors or --from-mesh")
        out = reconstruct_from_points(anchors, model, args.seed)
        save_mesh(args.out, topology, out)
        print(f"reconstructed mesh from {len(anchors)} anchors -> {args.out}")
        return 0

    if args.command == "eval":
        from .mesh import MaskConfig
        from .metrics import (diversity, fit_pca, frechet_pca, identity_preservation,
                              model_sampler, pick_pca_dim, write_report)
        from .training import load_dataset

        dataset = load_dataset(args.data)
        template_path = os.path.join(args.data, "template.obj")
        model, topology, _ = _load_model(args.model, template_path)
        test = dataset.test[: args.subjects]
        if len(test) == 0:
            raise ValueError("dataset has no held-out subjects")
        mask_cfg = MaskConfig(k_max=model.k_max, full_mask_probability=0.0)
        sampler = model_sampler(model)

        K = pick_pca_dim(dataset.train)
        pca = fit_pca(dataset.train, K)
        div, div_rows = diversity(sampler, test, topology, mask_cfg,
                                  n_regions=args.n_regions, n_samples=args.n_samples,
                                  seed=args.seed)
        id_, id_rows, manip_codes = identity_preservation(
            sampler, test, pca, topology, mask_cfg, n_regions=args.n_regions, seed=args.seed,
            return_codes=True,
        )
        real_codes = pca.project(dataset.test)
        fid = frechet_pca(real_codes, manip_codes)
        rows = [(i, float(div_rows[i]), float(id_rows[i])) for i in range(len(test))]
        write_report(
            args.out, div, fid, id_,
            config={"n_regions": args.n_regions, "n_samples": args.n_samples,
                    "pca_dim": K, "subjects": len(test), "model": os.path.basename(args.model)},
            seed=args.seed, n_subjects=len(test), per_subject_rows=rows,
            figures_dir=args.figures,
        )
        print(f"div {div:.4g}  fid {fid:.4g}  id {id_:.4g} -> {args.out}")
        return 0

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        model, _topology, _reference = _load_model(args.model, args.template)
        app = create_app(model, progress_every=args.progress_every,
                         max_jobs=args.max_jobs, undo_depth=args.undo_depth)
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return 0

    raise ValueError(f"unknown command {args.command!r}")


def _region_flags(topology, anchors, region, default_hops: int):
    import numpy as np

    from .mesh import khop_mask

    flags = np.zeros(topology.vertex_count, dtype=bool)
    if region is not None and "vertices" in region:
        flags[np.asarray(region["vertices"], dtype=np.int64)] = True
    else:
        hops = region["hops"] if region is not None else default_hops
        if not anchors:
            raise ValueError("hop-based region needs at least one anchor")
        for v, _ in anchors:
            flags |= khop_mask(topology, v, hops).flags
    for v, _ in anchors:
        flags[v] = False
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    try:
        return run(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line machine-parsable error
        from .errors import MeshSculptError

        kind = type(exc).__name__ if isinstance(exc, MeshSculptError) else "runtime"
        msg = str(exc).replace("\n", " ")
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
