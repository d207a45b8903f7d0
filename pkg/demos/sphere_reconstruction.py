"""Reconstruct a sphere from noisy surface samples and look at the result.

Fits a distance field, shows how ray-march refinement tightens the distance
far from the surface, reads off curvature at the surface, and writes a
volumetric rendering next to a sphere-traced depth map.

    python demos/sphere_reconstruction.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from gpdf import CameraModel, KernelConfig, NoiseModel, distance, fit, query, render_volumetric
from gpdf.io import write_pfm, write_ppm
from gpdf.render import ModelSource, pixel_rays, ray_box_bounds, sphere_trace_batch

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# unit sphere, 1500 points with 5 mm noise
X = rng.normal(size=(1500, 3))
X /= np.linalg.norm(X, axis=1, keepdims=True)
X += rng.normal(0, 0.005, X.shape)
colors = np.c_[0.5 + 0.5 * X[:, 2], np.full(len(X), 0.3), 0.5 - 0.5 * X[:, 2]].clip(0, 1)
model = fit(X, KernelConfig("matern_half", 0.5), NoiseModel(sigma_y2=1e-4), features=colors)

# the raw reverted mean underestimates far away; a few steps fix that
shell = 2.0 * X[:300] / np.linalg.norm(X[:300], axis=1, keepdims=True)
for k in (0, 1, 3, 5):
    err = np.mean(np.abs(distance(model, shell, refine_iters=k) - 1.0))
    print(f"refine_iters={k}: mean |distance error| on the radius-2 shell = {err:.4f}")

q = query(model, [0.0, 0.0, 1.0])
print(f"at the north pole: distance {q.distance:+.4f}, mean curvature {q.mean_curvature:+.3f} (sphere: -1),"
      f" Gaussian curvature {q.gaussian_curvature:+.3f} (sphere: +1)")

box = (np.full(3, -1.3), np.full(3, 1.3))
cam = CameraModel.look_at((2.5, 1.0, 1.0), (0, 0, 0), width=64, height=48)
img = render_volumetric(model, cam, box, n_samples=64)
write_ppm(out / "sphere_color.ppm", img.color)
write_pfm(out / "sphere_depth.pfm", img.depth)

o, d = pixel_rays(cam)
tn, tf, ok = ray_box_bounds(o, d, *box)
depth, hit = sphere_trace_batch(ModelSource(model).sdf, o, d, tn, tf)
hit = (hit & ok).reshape(img.depth.shape)
gap = np.abs(img.depth - depth.reshape(img.depth.shape))[hit]
print(f"volumetric vs sphere-traced depth over {hit.sum()} hit pixels: median gap {np.median(gap):.4f},"
      f" sample spacing {np.median(img.sample_spacing[hit]):.4f}")
print(f"images written to {out}/")
