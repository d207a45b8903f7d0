"""Active perception: ensemble information gain and uncertainty-driven touch.

Next-best-view scores a camera pose by how much an ensemble of distance
fields (differing in length scale) disagrees about what that camera would
see.  Per pixel and channel the members' renderings are Gaussians; their
uniform mixture is moment-matched to one Gaussian, and the gain is its
entropy minus the members' mean entropy.

Next-best-touch searches the estimated surface for the point of largest
posterior occupancy variance, stepping along the tangent plane while a
normal-direction term keeps iterates on the zero level set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import (
    GpdfModel,
    NoiseModel,
    distance,
    distance_derivatives,
    fit,
    occupancy_variance_and_gradient,
    variance_gradient,
)
from .render import CameraModel, render_volumetric

__all__ = [
    "Ensemble",
    "TouchTarget",
    "SensorPose",
    "make_ensemble",
    "information_gain",
    "information_gain_from_stats",
    "next_best_view",
    "variance_gradient",
    "surface_variance",
    "most_uncertain_surface_point",
    "touch_reference",
    "reference_velocity",
]

VAR_FLOOR = 1e-6


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member")

    @property
    def m(self) -> int:
        return len(self.members)


def make_ensemble(X, base_length_scale, noise: NoiseModel | None = None, multipliers=(0.5, 1.0, 2.0),
                  kind="matern_half", **fit_kwargs) -> Ensemble:
    """Fit one model per length-scale multiplier on the same points."""
    from .kernels import KernelConfig

    members = [
        fit(X, KernelConfig(kind, base_length_scale * float(mult)), noise, **fit_kwargs)
        for mult in multipliers
    ]
    return Ensemble(members)


def information_gain_from_stats(means, variances, var_floor: float = VAR_FLOOR):
    """Gain per element from member means/variances stacked on axis 0.

    ``0.5 log(var_mix) - mean_k 0.5 log(var_k)`` with the mixture variance
    ``mean_k var_k + mean_k (mu_k - mu_bar)^2``; the ``2 pi e`` constants
    cancel.
    """
    mu = np.asarray(means, dtype=float)
    var = np.maximum(np.asarray(variances, dtype=float), var_floor)
    spread = np.mean((mu - mu.mean(axis=0)) ** 2, axis=0)
    mix = var.mean(axis=0) + spread
    ig = 0.5 * np.log(mix) - np.mean(0.5 * np.log(var), axis=0)
    return np.maximum(ig, 0.0)


def information_gain(
    ensemble: Ensemble,
    camera: CameraModel,
    box,
    n_samples: int = 64,
    color_weight: float = 1.0,
    depth_weight: float = 1.0,
    sharpness: float | None = None,
    var_floor: float = VAR_FLOOR,
):
    """Total gain and the per-pixel gain image for one camera pose."""
    imgs = [render_volumetric(mdl, camera, box, n_samples=n_samples, sharpness=sharpness)
            for mdl in ensemble.members]
    cm = np.stack([im.color for im in imgs])
    cv = np.stack([im.color_var for im in imgs])
    dm = np.stack([im.depth for im in imgs])
    dv = np.stack([im.depth_var for im in imgs])
    ig_c = information_gain_from_stats(cm, cv, var_floor).sum(axis=2)
    ig_d = information_gain_from_stats(dm, dv, var_floor)
    per_pixel = color_weight * ig_c + depth_weight * ig_d
    return float(per_pixel.sum()), per_pixel


def next_best_view(ensemble: Ensemble, candidates, box, **kwargs):
    """Index of the highest-gain candidate (lowest index on ties) and all gains."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate poses")
    gains = np.array([information_gain(ensemble, c, box, **kwargs)[0] for c in candidates])
    best = int(np.argmax(gains))
    return best, gains


# ----------------------------------------------------------------------------
# touch


@dataclass
class TouchTarget:
    point: np.ndarray
    normal: np.ndarray
    variance: float
    ascent_trace: list = field(default_factory=list)
    start_index: int = -1
    converged_fraction: float = 1.0


@dataclass
class SensorPose:
    position: np.ndarray
    R: np.ndarray  # columns are the sensor axes in world coordinates


def surface_variance(model: GpdfModel, P):
    """Posterior occupancy variance at points ``P``."""
    return occupancy_variance_and_gradient(model, P)[0]


def _normals(model, P):
    r, g, _ = distance_derivatives(model, P, order=1)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    return r, g / np.maximum(gn, 1e-300)


def _project(model, P, steps=3, refine=2):
    for _ in range(steps):
        d = distance(model, P, refine_iters=refine)
        _, n = _normals(model, P)
        P = P - d[:, None] * n
    return P


def _tangent(g, n):
    s = g - np.einsum("ij,ij->i", g, n)[:, None] * n
    return s


def start_points(model: GpdfModel, n_starts: int | None = None, rng=None, offset: float = 0.5):
    """Training points pushed ``offset * l`` outward along the field normal."""
    rng = np.random.default_rng(0) if rng is None else rng
    X = model.X
    if n_starts is not None and n_starts < len(X):
        idx = np.sort(rng.choice(len(X), n_starts, replace=False))
        X = X[idx]
    _, n = _normals(model, X)
    return X + offset * model.kernel.length_scale * n


def most_uncertain_surface_point(
    model: GpdfModel,
    n_starts: int | None = None,
    iterations: int = 20,
    step: float | None = None,
    method: str = "dual",
    tol: float | None = None,
    box=None,
    starts=None,
    rng=None,
    momentum: float = 0.9,
) -> TouchTarget:
    """Climb the occupancy variance along the estimated surface.

    ``method``:

    * ``"dual"``: ``x <- x - d n + eps (2k+1)/(k+2) s`` with ``s`` the unit
      tangential component of the variance gradient,
    * ``"projected"``: tangent step of size ``eps`` then projection onto the
      surface,
    * ``"accelerated"``: as projected, with a heavy-ball tangent velocity.

    All starts run in lockstep; the best iterate that lies within ``tol`` of
    the surface (after a final projection) is returned.
    """
    if method not in ("dual", "projected", "accelerated"):
        raise ValueError(f"unknown ascent method {method!r}")
    l = model.kernel.length_scale
    eps = 0.1 * l if step is None else step
    if box is None:
        lo, hi = model.X.min(axis=0) - 2 * l, model.X.max(axis=0) + 2 * l
    else:
        lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    if tol is None:
        tol = 0.01 * float(np.linalg.norm(hi - lo))
    P = start_points(model, n_starts, rng) if starts is None else np.atleast_2d(np.asarray(starts, dtype=float))
    if len(P) < 1:
        raise ValueError("need at least one start")
    P = _project(model, P, steps=1)
    vel = np.zeros_like(P)
    traces = [P.copy()]
    alive = np.ones(len(P), dtype=bool)
    for k in range(iterations):
        var, gvar = occupancy_variance_and_gradient(model, P)
        d = distance(model, P, refine_iters=2)
        _, n = _normals(model, P)
        s = _tangent(gvar, n)
        sn = np.linalg.norm(s, axis=1, keepdims=True)
        s = np.where(sn > 0, s / np.maximum(sn, 1e-300), 0.0)
        if method == "dual":
            P = P - d[:, None] * n + eps * ((2 * k + 1) / (k + 2)) * s
        elif method == "projected":
            P = _project(model, P + eps * s, steps=1)
        else:
            vel = momentum * _tangent(vel, n) + eps * s
            P = _project(model, P + vel, steps=1)
        alive &= np.all((P >= lo) & (P <= hi), axis=1) & np.all(np.isfinite(P), axis=1)
        P = np.where(alive[:, None], P, traces[-1])
        traces.append(P.copy())
    P = np.where(alive[:, None], _project(model, P, steps=2), P)
    traces.append(P.copy())
    d_final = np.abs(distance(model, P, refine_iters=2))
    ok = alive & (d_final < tol)
    if not np.any(ok):
        raise RuntimeError("no ascent start converged onto the surface")
    var = surface_variance(model, P)
    cand = np.where(ok, var, -np.inf)
    best = int(np.argmax(cand))
    _, nb = _normals(model, P[best : best + 1])
    trace = [t[best].copy() for t in traces]
    return TouchTarget(P[best].copy(), nb[0], float(var[best]), trace, best, float(ok.mean()))


def touch_reference(target: TouchTarget, standoff: float = 0.0) -> SensorPose:
    """Sensor pose ``standoff`` above the target with its z-axis into the surface."""
    n = np.asarray(target.normal, dtype=float)
    n = n / np.linalg.norm(n)
    z = -n
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return SensorPose(np.asarray(target.point, dtype=float) + standoff * n, np.stack([x, y, z], axis=1))


def reference_velocity(x_ref, x_cur, gain: float = 1.0):
    """Proportional approach velocity ``gain * (x_ref - x_cur)``."""
    if gain <= 0:
        raise ValueError("gain must be positive")
    return gain * (np.asarray(x_ref, dtype=float) - np.asarray(x_cur, dtype=float))
