"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and runtime budgets are fixed; fixtures are documented inline.
"""
import json
import time

import numpy as np
import pytest
from shapes import central_gradient, fibonacci_sphere
from threadpoolctl import threadpool_limits

from gpdf import sim
from gpdf.approx import OutOfDomainError, approx_fit, approx_query, benchmark, circle_points, make_factors
from gpdf.cli import main
from gpdf.downsample import EmitMode, VoxelGrid, accumulate, merge, voxel_downsample
from gpdf.explore import Ensemble, information_gain, most_uncertain_surface_point, surface_variance
from gpdf.field import (
    NoiseModel,
    distance,
    distance_derivatives,
    fit,
    occupancy,
    occupancy_variance_and_gradient,
)
from gpdf.kernels import KernelConfig
from gpdf.render import (
    CameraModel,
    ModelSource,
    RenderView,
    optimize_by_rendering,
    pixel_rays,
    ray_box_bounds,
    render_volumetric,
    sphere_trace_batch,
    transmittance_partition,
)
from gpdf.updates import add_points, remove_points

BOX13 = (np.full(3, -1.3), np.full(3, 1.3))
SMALL_SPHERE = {
    "primitives": [{"type": "sphere", "params": {"center": [0, 0, 0], "radius": 0.15}, "color": [0.8, 0.2, 0.2]}],
    "workspace_box": [[-0.2] * 3, [0.2] * 3],
}


@pytest.fixture
def report(capsys):
    """Print one verdict line outside pytest's capture, then assert."""
    def _report(name, checks, elapsed, budget, detail=""):
        checks = dict(checks)
        checks["runtime"] = elapsed < budget
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail} [{elapsed:.1f}s / {budget:.0f}s]"
                  + (f" failed={failed}" if failed else ""))
        assert ok, f"{name}: failed checks {failed}; {detail}"
    return _report


def _rel(a, b, floor):
    # worst per-query relative error, norms taken over the trailing axes
    axes = tuple(range(1, a.ndim))
    return float(np.max(np.linalg.norm(a - b, axis=axes) / np.maximum(np.linalg.norm(b, axis=axes), floor)))


class TestAcceptance:
    def test_01_single_point_exactness(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        p = rng.normal(size=(1, 3))
        m = fit(p, KernelConfig("matern_half", 0.3), NoiseModel(sigma_y2=0.0))
        Q = p + rng.uniform(-3, 3, (1000, 3))
        r, g, _ = distance_derivatives(m, Q)
        diff = Q - p
        true_d = np.linalg.norm(diff, axis=1)
        err_d = np.abs(r - true_d).max()
        err_g = np.abs(g - diff / true_d[:, None]).max()
        report("C1 single-point exactness", {"distance": err_d < 1e-9, "gradient": err_g < 1e-9},
               time.perf_counter() - t0, 1.0, f"max|d err|={err_d:.2e} max|grad err|={err_g:.2e}")

    def test_02_derivative_fidelity(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        m = fit(fibonacci_sphere(500), KernelConfig("matern_half", 0.3), NoiseModel(sigma_y2=1e-4))
        Q = rng.uniform(-1.5, 1.5, (100, 3))
        _, g, H = distance_derivatives(m, Q, order=2)
        fd_g = central_gradient(lambda P: distance_derivatives(m, P)[0], Q)
        fd_H = np.stack([central_gradient(lambda P: distance_derivatives(m, P)[1][:, k], Q, h=1e-5)
                         for k in range(3)], axis=1)
        _, gv = occupancy_variance_and_gradient(m, Q)
        fd_v = central_gradient(lambda P: occupancy_variance_and_gradient(m, P)[0], Q)
        e_g, e_H, e_v = _rel(g, fd_g, 1e-6), _rel(H, fd_H, 1e-4), _rel(gv, fd_v, 1e-6)
        report("C2 derivative fidelity", {"gradient": e_g < 1e-4, "hessian": e_H < 1e-3, "var_grad": e_v < 1e-4},
               time.perf_counter() - t0, 30.0, f"rel err grad={e_g:.1e} hess={e_H:.1e} var grad={e_v:.1e}")

    def test_03_ray_march_refinement(self, report):
        t0 = time.perf_counter()
        m = fit(fibonacci_sphere(2000), KernelConfig("matern_half", 0.5), NoiseModel(sigma_y2=1e-4))
        Q = fibonacci_sphere(500, 2.0)
        errs = np.array([np.mean(np.abs(distance(m, Q, k) - 1.0)) for k in range(6)])
        report("C3 ray-march refinement", {"monotone": bool(np.all(np.diff(errs) < 0)), "final": errs[-1] < 0.02},
               time.perf_counter() - t0, 60.0, "errors " + " ".join(f"{e:.4f}" for e in errs))

    def test_04_incremental_batch(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(4)
        cfg, noise = KernelConfig("matern_half", 0.4), NoiseModel(sigma_y2=1e-3)
        X = fibonacci_sphere(110) + rng.normal(0, 0.01, (110, 3))
        Q = rng.uniform(-1.5, 1.5, (200, 3))
        base = fit(X[:100], cfg, noise)
        grown = add_points(base, X[100:])
        back = remove_points(grown, np.arange(100, 110))
        e_round = np.abs(occupancy(back, Q) - occupancy(base, Q)).max()
        e_batch = np.abs(occupancy(grown, Q) - occupancy(fit(X, cfg, noise), Q)).max()
        report("C4 incremental/batch", {"add_delete": e_round < 1e-8, "add_only": e_batch < 1e-8},
               time.perf_counter() - t0, 10.0, f"add+delete={e_round:.1e} add-only={e_batch:.1e}")

    def test_05_kernel_approximation_protocol(self, report):
        t0 = time.perf_counter()
        cfg = KernelConfig("matern_half", 0.2)
        rng = np.random.default_rng(5)
        with threadpool_limits(1):
            # (a) full-rank references reproduce the exact posterior mean
            X = circle_points(300, 1.0, rng)
            am = approx_fit(X, make_factors("nystrom", cfg, refs=X), 1e-4)
            Q = rng.uniform(-5, 5, (500, 2))
            e_a = np.abs(approx_query(am, Q)[0] - occupancy(fit(X, cfg, NoiseModel(sigma_y2=1e-4)), Q)).max()
            # (b) exterior queries at radius 3, grids on the tight box around the data
            rep_b = {r["method"]: r for r in benchmark(n_sweep=(2000,), half_width=1.5, nodes=41,
                                                      outside_radius=3.0, repeats=1)}
            raises = []
            X = circle_points(2000, 1.0, rng)
            for meth in ("ski", "hilbert"):
                gm = approx_fit(X, make_factors(meth, cfg, 1.5, 41), 1e-4)
                try:
                    approx_query(gm, np.array([[3.0, 0.0]]))
                    raises.append(False)
                except OutOfDomainError:
                    raises.append(True)
            out = {k: v["rms_distance_error_outside"] for k, v in rep_b.items()}
            # (c) training time, box [-5, 5], equal m for every method
            rep_c = benchmark(n_sweep=(1000, 2000, 4000), repeats=2, n_queries=50)
        fit_ms = {(r["method"], r["n"]): r["fit_ms"] for r in rep_c}
        order = all(fit_ms[("ski", n)] < min(fit_ms[("hilbert", n)], fit_ms[("nystrom", n)])
                    for n in (1000, 2000, 4000))
        timing = " ".join(f"n={n}:" + "/".join(f"{fit_ms[(k, n)]:.0f}" for k in ("ski", "hilbert", "nystrom"))
                          for n in (1000, 2000, 4000))
        report(
            "C5 kernel approximation protocol",
            {"a_full_rank": e_a < 1e-6,
             "b_nystrom_outside": out["nystrom"] < 0.05,
             "b_grid_outside": out["ski"] > 0.2 and out["hilbert"] > 0.2 and all(raises),
             "c_order": order,
             "c_ski_2000": fit_ms[("ski", 2000)] < 500.0},
            time.perf_counter() - t0, 300.0,
            f"(a) {e_a:.1e}; (b) outside rms ski={out['ski']:.3g} hilbert={out['hilbert']:.3g} "
            f"nystrom={out['nystrom']:.3g}; (c) fit ms ski/hilbert/nystrom {timing}",
        )

    def test_06_linear_scaling(self, report):
        t0 = time.perf_counter()
        cfg = KernelConfig("matern_half", 0.2)
        rng = np.random.default_rng(6)
        ns = np.array([500, 1000, 2000, 4000, 8000])
        factors = make_factors("nystrom", cfg, refs=circle_points(200, 1.0, rng))
        times = []
        with threadpool_limits(1):
            for n in ns:
                X = circle_points(int(n), 1.0, rng)
                best = np.inf
                for _ in range(5):
                    t = time.perf_counter()
                    approx_fit(X, factors, 1e-4)
                    best = min(best, time.perf_counter() - t)
                times.append(best)
        slope = np.polyfit(np.log(ns), np.log(times), 1)[0]
        report("C6 linear scaling", {"slope": abs(slope - 1.0) <= 0.3}, time.perf_counter() - t0, 300.0,
               f"nystrom m={factors.m} slope={slope:.3f} times ms " + " ".join(f"{1e3 * t:.2f}" for t in times))

    def test_07_voxel_downsampling(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        P = rng.normal(size=(2000, 3))
        w = rng.uniform(0.5, 2.0, 2000)
        o = np.zeros(3)
        worst = 0.0
        for k in (1, 500, 1999):
            ab = merge(accumulate(VoxelGrid(0.3, o), P[:k], w[:k]), accumulate(VoxelGrid(0.3, o), P[k:], w[k:]))
            ref = accumulate(VoxelGrid(0.3, o), P, w)
            assert set(ab.cells) == set(ref.cells)
            for key in ref.cells:
                (ma, ca), (mr, cr) = ab.mean_cov(key), ref.mean_cov(key)
                worst = max(worst, np.abs(ma - mr).max(), np.abs(ca - cr).max())
        X = fibonacci_sphere(3000) + rng.normal(0, 0.005, (3000, 3))
        Q = rng.uniform(-1.5, 1.5, (2000, 3))
        cfg, noise = KernelConfig("matern_half", 0.2), NoiseModel(sigma_y2=1e-4)
        v_raw = occupancy(fit(X, cfg, noise), Q, return_var=True)[1]
        dist = {}
        for mode in (EmitMode.MEAN_ONLY, EmitMode.EIGEN_AUGMENTED):
            em = voxel_downsample(X, 0.3, mode)
            v = occupancy(fit(em.points, cfg, noise), Q, return_var=True)[1]
            dist[mode] = (len(em.points), float(np.linalg.norm(v - v_raw)))
        (n_m, d_m), (n_e, d_e) = dist[EmitMode.MEAN_ONLY], dist[EmitMode.EIGEN_AUGMENTED]
        report("C7 voxel downsampling", {"merge": worst < 1e-12, "eigen_closer": d_e < d_m},
               time.perf_counter() - t0, 120.0,
               f"merge err={worst:.1e}; L2 to raw variance: mean-only {d_m:.3f} ({n_m} pts), "
               f"eigen {d_e:.3f} ({n_e} pts)")

    def test_08_rendering_consistency(self, report):
        t0 = time.perf_counter()
        m = fit(fibonacci_sphere(2000), KernelConfig("matern_half", 0.5), NoiseModel(sigma_y2=1e-4))
        cam = CameraModel.look_at((3.0, 0.0, 0.5), (0, 0, 0))
        part, _ = transmittance_partition(m, cam, BOX13, n_samples=64)
        e_part = float(np.abs(np.asarray(part) - 1.0).max())
        img = render_volumetric(m, cam, BOX13, n_samples=64)
        o, d = pixel_rays(cam)
        tn, tf, ok = ray_box_bounds(o, d, *BOX13)
        dep, hit = sphere_trace_batch(ModelSource(m).sdf, o, d, tn, tf)
        hit = (hit & ok).reshape(img.depth.shape)
        dep = dep.reshape(img.depth.shape)
        within = np.abs(img.depth - dep)[hit] <= img.sample_spacing[hit]
        frac = float(within.mean())
        report("C8 rendering consistency", {"partition": e_part < 1e-9, "depth": frac >= 0.95},
               time.perf_counter() - t0, 60.0,
               f"partition err={e_part:.1e}; depth within spacing on {frac:.3f} of {hit.sum()} hit pixels")

    def test_09_render_based_recovery(self, report):
        t0 = time.perf_counter()
        rng = np.random.default_rng(9)
        rgb = np.array([0.8, 0.2, 0.2])

        class Ball:
            def sdf(self, P):
                return np.linalg.norm(P, axis=1) - 1.0

            def color(self, P):
                return np.broadcast_to(rgb, (len(P), 3))

        views = []
        for k in range(8):
            az, el = 2 * np.pi * k / 8, (0.5 if k % 2 else -0.3)
            pos = 3.0 * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
            cam = CameraModel.look_at(pos, (0, 0, 0))
            im = render_volumetric(Ball(), cam, BOX13, n_samples=64, sharpness=50.0)
            views.append(RenderView(cam, im.color, im.depth))
        X = fibonacci_sphere(100) + rng.normal(0, 0.05, (100, 3))
        m = fit(X, KernelConfig("matern_half", 0.5), NoiseModel(sigma_y2=1e-4), features=np.tile(rgb, (100, 1)))

        def surface_error(P):
            return float(np.mean(np.abs(np.linalg.norm(P, axis=1) - 1.0)))

        res = optimize_by_rendering(m, views, BOX13, iterations=500, n_samples=64, sharpness=50.0,
                                    step=0.01, tol=1e-3)
        e0, e1 = surface_error(X), surface_error(res.model.X)
        report("C9 render-based recovery", {"error": e1 < 0.02, "iterations": res.accepted + res.rejected <= 500},
               time.perf_counter() - t0, 600.0,
               f"mean surface error {e0:.4f} -> {e1:.4f} after {res.accepted} accepted steps")

    def test_10_information_gain(self, report):
        t0 = time.perf_counter()
        scene = sim.sphere_scene(0.1)
        cams = sim.view_sphere(np.zeros(3), 0.67, n_azimuth=2, elevations_deg=(20.0,))
        frame = sim.virtual_rgbd(scene, cams[0])
        members = [fit(frame.points, KernelConfig("matern_half", l), NoiseModel(sigma_y2=1e-4),
                       features=frame.point_colors) for l in (0.05, 0.1, 0.2)]
        box = scene.workspace_box
        ig_one = information_gain(Ensemble(members[:1]), cams[1], box, n_samples=32)[0]
        ig_same = information_gain(Ensemble([members[1]] * 3), cams[1], box, n_samples=32)[0]
        ens = Ensemble(members)
        ig_seen, ig_unseen = (information_gain(ens, c, box, n_samples=32)[0] for c in cams)
        # four greedy views from a single first frame, then rescore every candidate
        config = {"scene": SMALL_SPHERE, "budgets": {"views": 4, "touches": 0}, "seed": 3,
                  "vision_update": "points"}
        res = sim.run_exploration(config)
        lo, hi = np.asarray(config["scene"]["workspace_box"], dtype=float)
        radius = 1.1 * 0.5 * float(np.linalg.norm(hi - lo)) / np.tan(np.deg2rad(30.0))
        candidates = sim.view_sphere(0.5 * (lo + hi), radius)
        ig_first = res.metrics[1]["max_ig"]
        ig_end = max(information_gain(res.ensemble, c, (lo, hi), n_samples=32)[0] for c in candidates)
        report("C10 information gain",
               {"singleton": abs(ig_one) < 1e-9, "identical": abs(ig_same) < 1e-9,
                "unseen_gt_seen": ig_unseen > ig_seen, "loop_decreases": ig_end < ig_first},
               time.perf_counter() - t0, 300.0,
               f"singleton={ig_one:.1e} identical={ig_same:.1e}; seen={ig_seen:.1f} unseen={ig_unseen:.1f}; "
               f"max candidate IG first={ig_first:.1f} end={ig_end:.1f}")

    def test_11_tactile_loop(self, report):
        t0 = time.perf_counter()
        config = {"scene": SMALL_SPHERE, "budgets": {"views": 0, "touches": 10}, "seed": 3}
        res = sim.run_exploration(config)
        seq = np.array([e["max_surface_var"] for e in res.metrics])
        touch_seq = seq[[e["phase"] == "touch" for e in res.metrics]]
        decreasing = len(touch_seq) == 10 and bool(np.all(np.diff(seq) < 0))
        # hole fixture: 35 degree cap removed from a sampled unit sphere
        X = fibonacci_sphere(600)
        X = X[X[:, 2] < np.cos(np.deg2rad(35))]
        m = fit(X, KernelConfig("matern_half", 0.5), NoiseModel(sigma_y2=1e-4))
        G = fibonacci_sphere(20000)
        oracle = G[np.argmax(surface_variance(m, G))]
        tg = most_uncertain_surface_point(m, n_starts=32, iterations=30, rng=np.random.default_rng(0))
        p = tg.point / np.linalg.norm(tg.point)
        angle = float(np.degrees(np.arccos(np.clip(p @ oracle, -1.0, 1.0))))
        report("C11 tactile loop", {"strictly_decreasing": decreasing, "hole_angle": angle < 15.0},
               time.perf_counter() - t0, 300.0,
               "max surface var " + " ".join(f"{v:.4g}" for v in seq) + f"; hole angle {angle:.2f} deg")

    def test_12_end_to_end_determinism(self, report, tmp_path):
        t0 = time.perf_counter()
        config = {"scene": SMALL_SPHERE, "budgets": {"views": 2, "touches": 3}, "seed": 11}
        (tmp_path / "run.json").write_text(json.dumps(config))
        codes, logs = [], []
        for k in range(2):
            log = tmp_path / f"log{k}.jsonl"
            codes.append(main(["explore", str(tmp_path / "run.json"), "--log", str(log)]))
            logs.append(log.read_bytes())
        report("C12 end-to-end determinism", {"exit_codes": codes == [0, 0], "identical": logs[0] == logs[1],
                                              "non_empty": len(logs[0]) > 0},
               time.perf_counter() - t0, 120.0, f"{len(logs[0])} bytes, {len(logs[0].splitlines())} lines per log")
