"""Command-line entry point: ``gpdf <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure, 4 file I/O error.  ``GPDF_SEED`` overrides the default seed and
``GPDF_THREADS`` caps BLAS threads for every command.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .approx import OutOfDomainError, benchmark
from .downsample import EmitMode, voxel_downsample
from .explore import make_ensemble, most_uncertain_surface_point, next_best_view
from .field import (
    FactorizationError,
    NoiseMode,
    NoiseModel,
    curvatures_from,
    default_length_scale,
    distance,
    distance_derivatives,
    fit,
    occupancy,
)
from .kernels import KernelConfig, KernelKind
from .render import ModelSource, pixel_rays, ray_box_bounds, render_volumetric, sphere_trace_batch
from .sim import ConfigError, NoContactError, run_exploration

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("GPDF_SEED", "0"))


def _floats(text, count=None):
    vals = [float(v) for v in text.split(",")]
    if count is not None and len(vals) != count:
        raise ValueError(f"expected {count} comma-separated numbers, got {text!r}")
    return vals


def _box(text, model=None):
    if text is not None:
        v = _floats(text, 6)
        return np.array(v[:3]), np.array(v[3:])
    margin = 2 * model.kernel.length_scale
    return model.X.min(axis=0) - margin, model.X.max(axis=0) + margin


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ----------------------------------------------------------------------------
# commands


def cmd_fit(args):
    X, colors, sigma = io.read_cloud(args.cloud)
    l = args.length_scale or default_length_scale(X)
    kernel = KernelConfig(KernelKind(args.kernel), l, args.alpha)
    input_var = None
    if args.noisy_input:
        sx = [args.sigma_x**2] * X.shape[1]
        noise = NoiseModel(NoiseMode.NOISY_INPUT, args.sigma_y2, tuple(sx))
        if sigma is not None:
            s = np.asarray(sigma, dtype=float)
            input_var = (s[:, None] ** 2 * np.ones((1, X.shape[1]))) if s.ndim == 1 else s**2
    else:
        noise = NoiseModel(NoiseMode.SCALAR_OBSERVATION, args.sigma_y2)
    model = fit(X, kernel, noise, features=colors, input_var=input_var)
    io.save_model(args.out, model)
    print(json.dumps({"n": model.n, "length_scale": l, "model": str(args.out)}))


def _query_points(args):
    if args.points is not None:
        return io.read_cloud(args.points)[0]
    if args.grid is None:
        raise ValueError("give --points or --grid")
    v = _floats(args.grid, 7)
    n = int(v[6])
    if n < 1:
        raise ValueError("grid needs at least one node per axis")
    axes = [np.linspace(v[k], v[k + 3], n) for k in range(3)]
    G = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in G], axis=1)


def cmd_query(args):
    model = io.load_model(args.model)
    Q = _query_points(args)
    d = distance(model, Q, refine_iters=args.refine)
    _, v = occupancy(model, Q, return_var=True)
    _, g, h = distance_derivatives(model, Q, order=2)
    gn = np.linalg.norm(g, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mc, gc = curvatures_from(g, h)
    rows = np.c_[Q, d, g, mc, gc, v, np.abs(1 - gn)]
    header = "x y z distance gx gy gz mean_curvature gaussian_curvature variance eikonal"
    out = sys.stdout if args.out is None else open(args.out, "w")
    try:
        np.savetxt(out, rows, fmt="%.17g", header=header)
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_render(args):
    model = io.load_model(args.model)
    views = io.read_manifest(args.manifest)
    box = _box(args.box, model)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    src = ModelSource(model, refine_iters=args.refine)
    written = []
    for k, (cam, _, _) in enumerate(views):
        if args.mode == "volumetric":
            img = render_volumetric(src, cam, box, n_samples=args.samples)
            color, depth = img.color, img.depth
            io.write_pfm(outdir / f"view_{k:03d}_color_var.pfm", img.color_var.mean(axis=2))
            io.write_pfm(outdir / f"view_{k:03d}_depth_var.pfm", img.depth_var)
        else:
            o, dirs = pixel_rays(cam)
            tn, tf, ok = ray_box_bounds(o, dirs, *box)
            depth, hit = sphere_trace_batch(src.sdf, o, dirs, np.where(ok, tn, 0), np.where(ok, tf, 0))
            hit &= ok
            P = o + depth[:, None] * dirs
            color = np.where(hit[:, None], src.color(P), 0.0).reshape(cam.height, cam.width, 3)
            depth = np.where(hit, depth, 0.0).reshape(cam.height, cam.width)
        io.write_ppm(outdir / f"view_{k:03d}.ppm", color)
        io.write_pfm(outdir / f"view_{k:03d}_depth.pfm", depth)
        written.append(f"view_{k:03d}")
    print(json.dumps({"views": written, "out_dir": str(outdir)}))


def cmd_downsample(args):
    X, colors, sigma = io.read_cloud(args.cloud)
    mode = EmitMode.MEAN_ONLY if args.mode == "mean" else EmitMode.EIGEN_AUGMENTED
    em = voxel_downsample(X, args.voxel, mode)
    io.write_cloud(args.out, em.points, sigma=np.sqrt(em.uncertainty) if args.with_sigma else None)
    print(json.dumps({"n_in": len(X), "n_out": len(em.points)}))


def cmd_bench(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    sweep = [int(v) for v in args.n_sweep.split(",")]
    with threadpool_limits(1):
        report = benchmark(methods, sweep, length_scale=args.length_scale, half_width=args.half_width,
                           nodes=args.nodes, n_refs=args.refs, nystrom_refs=args.nystrom_refs,
                           outside_radius=args.outside_radius,
                           downsample=args.downsample, repeats=args.repeats, seed=_seed(args))
    _dump({"threads": 1, "results": report}, args.out)


def _load_members(args):
    if len(args.model) > 1:
        from .explore import Ensemble

        return Ensemble([io.load_model(p) for p in args.model])
    base = io.load_model(args.model[0])
    mults = _floats(args.multipliers)
    return make_ensemble(base.X, base.kernel.length_scale, base.noise, mults, base.kernel.kind,
                         features=base.feature_table, point_var=base.point_var)


def cmd_nbv(args):
    ens = _load_members(args)
    cams = [c for c, _, _ in io.read_manifest(args.candidates)]
    box = _box(args.box, ens.members[0])
    best, gains = next_best_view(ens, cams, box, n_samples=args.samples)
    _dump({"best": best, "pose": cams[best].to_dict(), "gains": gains.tolist()}, args.out)


def cmd_touch(args):
    model = io.load_model(args.model)
    rng = np.random.default_rng(_seed(args))
    box = _box(args.box, model) if args.box else None
    t = most_uncertain_surface_point(model, n_starts=args.starts, iterations=args.iterations,
                                     method=args.method, box=box, rng=rng)
    _dump({"point": t.point.tolist(), "normal": t.normal.tolist(), "variance": t.variance,
           "start_index": t.start_index, "converged_fraction": t.converged_fraction}, args.out)


def cmd_explore(args):
    try:
        config = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if args.seed is not None or "GPDF_SEED" in os.environ:
        if isinstance(config, dict):
            config["seed"] = _seed(args)
    res = run_exploration(config, log_path=args.log, snapshot_dir=args.snapshots)
    if args.model_out:
        io.save_model(args.model_out, res.model)
    if args.log is None:
        for entry in res.metrics:
            print(json.dumps(entry))


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpdf", description="Gaussian-process distance fields")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", help="fit a distance field to a point cloud")
    s.add_argument("cloud", help="XYZ or ASCII PLY point cloud")
    s.add_argument("out", help="output model file (JSON)")
    s.add_argument("--kernel", default="matern_half", choices=[k.value for k in KernelKind])
    s.add_argument("--length-scale", type=float, default=None, help="default: from point spacing")
    s.add_argument("--alpha", type=float, default=1.0, help="rational quadratic shape")
    s.add_argument("--sigma-y2", type=float, default=1e-4, help="occupancy noise variance")
    s.add_argument("--noisy-input", action="store_true", help="propagate input noise (sigma column)")
    s.add_argument("--sigma-x", type=float, default=0.0, help="input noise std when the cloud has none")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("query", help="distance, gradient, curvature, variance and eikonal gap")
    s.add_argument("model")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--points", help="query point file")
    g.add_argument("--grid", help="x0,y0,z0,x1,y1,z1,n  (n nodes per axis)")
    s.add_argument("--refine", type=int, default=5, help="ray-march refinement steps")
    s.add_argument("--out", help="output table (default stdout)")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("render", help="render views listed in a manifest")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("--mode", choices=["spheretrace", "volumetric"], default="volumetric")
    s.add_argument("--out-dir", default="renders")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--refine", type=int, default=0)
    s.add_argument("--box", help="x0,y0,z0,x1,y1,z1 (default: data bounds + 2l)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("downsample", help="voxel-grid downsampling")
    s.add_argument("cloud")
    s.add_argument("out")
    s.add_argument("--voxel", type=float, required=True)
    s.add_argument("--mode", choices=["mean", "eigen"], default="mean")
    s.add_argument("--with-sigma", action="store_true", help="write per-point uncertainty column")
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("bench-approx", help="kernel approximation timing/accuracy report")
    s.add_argument("--methods", default="ski,hilbert,nystrom")
    s.add_argument("--n-sweep", default="1000,2000,4000")
    s.add_argument("--length-scale", type=float, default=0.2)
    s.add_argument("--half-width", type=float, default=5.0)
    s.add_argument("--nodes", type=int, default=41)
    s.add_argument("--nystrom-refs", choices=["grid", "data"], default="grid",
                   help="Nystrom references: the grid nodes, or --refs random training points")
    s.add_argument("--refs", type=int, default=200, help="Nystrom reference count with --nystrom-refs data")
    s.add_argument("--outside-radius", type=float, default=None)
    s.add_argument("--downsample", type=float, default=None, help="voxel size applied to training points")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", help="JSON report path (default stdout)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("nbv", help="score candidate views by ensemble information gain")
    s.add_argument("model", nargs="+", help="one model (ensemble built by multipliers) or several")
    s.add_argument("--candidates", required=True, help="view manifest of candidate poses")
    s.add_argument("--multipliers", default="0.5,1,2")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--box")
    s.add_argument("--out")
    s.set_defaults(func=cmd_nbv)

    s = sub.add_parser("touch", help="most uncertain surface point")
    s.add_argument("model")
    s.add_argument("--starts", type=int, default=None, help="number of ascent starts (default: all points)")
    s.add_argument("--iterations", type=int, default=20)
    s.add_argument("--method", choices=["dual", "projected", "accelerated"], default="dual")
    s.add_argument("--box")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_touch)

    s = sub.add_parser("explore", help="simulated vision + touch exploration run")
    s.add_argument("config", help="run configuration (JSON)")
    s.add_argument("--log", help="JSON-lines metrics output (default stdout)")
    s.add_argument("--model-out")
    s.add_argument("--snapshots", help="directory for per-view images")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_explore)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    threads = os.environ.get("GPDF_THREADS")
    try:
        if threads:
            with threadpool_limits(int(threads)):
                args.func(args)
        else:
            args.func(args)
    except (np.linalg.LinAlgError, FactorizationError, OutOfDomainError, NoContactError,
            FloatingPointError, RuntimeError) as exc:
        print(json.dumps({"error": "numeric", "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, io.SchemaError, ValueError, KeyError, TypeError) as exc:
        print(json.dumps({"error": "invalid", "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
