"""Compare the three low-rank kernel approximations on a 2-D circle.

SKI and the Hilbert basis live on a grid box; Nyström only needs reference
points.  Inside the box all three track the exact field, outside it only
Nyström still produces a usable distance.

    python demos/approximations.py
"""
import numpy as np
from threadpoolctl import threadpool_limits

from gpdf.approx import OutOfDomainError, approx_fit, approx_query, benchmark, circle_points, make_factors
from gpdf.field import distance
from gpdf.kernels import KernelConfig

cfg = KernelConfig("matern_half", 0.2)
rng = np.random.default_rng(0)
X = circle_points(1500, 1.0, rng)

inside = np.array([[1.3, 0.0], [0.0, 0.5]])
outside = np.array([[3.0, 0.0]])
for method in ("ski", "hilbert", "nystrom"):
    kw = {"refs": circle_points(300, 1.0, rng)} if method == "nystrom" else {}
    f = make_factors(method, cfg, half_width=1.5, nodes=41, outside="extrapolate", **kw)
    m = approx_fit(X, f, 1e-4)
    # extrapolated lattice fields can reach zero occupancy, an infinite distance
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d_in = distance(m, inside, refine_iters=3)
        d_out = distance(m, outside, refine_iters=3)
    print(f"{method:8s} m={f.m:5d}  distance at (1.3,0) {d_in[0]:.3f} (true 0.3), "
          f"(0,0.5) {d_in[1]:.3f} (true 0.5), (3,0) {d_out[0]:.3f} (true 2.0)")
    if method != "nystrom":
        strict = approx_fit(X, make_factors(method, cfg, half_width=1.5, nodes=41), 1e-4)
        try:
            approx_query(strict, outside)
        except OutOfDomainError as exc:
            print(f"         with outside='raise': {exc}")

print("\nsingle-threaded training time, box [-5, 5], every method with m = 41^2:")
with threadpool_limits(1):
    for r in benchmark(n_sweep=(1000, 2000), repeats=1, n_queries=20):
        print(f"  {r['method']:8s} n={r['n']:5d}  fit {r['fit_ms']:8.1f} ms  "
              f"batch query {r['query_ms_batch']:7.2f} ms")
