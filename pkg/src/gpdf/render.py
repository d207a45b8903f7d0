"""Pinhole cameras, sphere tracing and volumetric SDF rendering.

Volumetric rendering samples each ray at equidistant parameters ``t_i``
inside the workspace box and converts signed distances to opacities with a
logistic CDF ``Phi_s(d) = 1 / (1 + exp(-s d))``::

    alpha_i = max((Phi_s(d_i) - Phi_s(d_{i+1})) / Phi_s(d_i), 0)
    T_i     = prod_{j<i} (1 - alpha_j)
    C       = sum_i T_i alpha_i c_i
    D       = sum_i T_i alpha_i t_i

Per-pixel variances are the weighted spreads of ``c_i`` and ``t_i`` about
the composites.  :func:`optimize_by_rendering` back-propagates an image loss
through this compositing and the GP's linear solve onto training point
positions and colours.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import expit

from .field import GpdfModel, NoiseMode, distance_derivatives, fit, infer_feature_field
from .kernels import KernelConfig, kernel_derivatives, kernel_matrix, revert_derivatives

PHI_FLOOR = 1e-12


# ----------------------------------------------------------------------------
# cameras and rays


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a camera-to-world pose ``x_w = R x_c + t``.

    The camera looks along its +z axis with +x right and +y down in the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a rotation matrix")
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("focal lengths and image size must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def position(self):
        return self.t

    @property
    def forward(self):
        return self.R[:, 2]

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), width=32, height=24, fov_deg=60.0):
        """Camera at ``position`` whose optical axis passes through ``target``."""
        position = np.asarray(position, dtype=float)
        z = np.asarray(target, dtype=float) - position
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=float)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height, np.stack([x, y, z], axis=1), position)

    def to_dict(self) -> dict:
        return {
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                           "width": self.width, "height": self.height},
            "pose": {"R": self.R.ravel().tolist(), "t": self.t.tolist()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        k = data["intrinsics"]
        p = data["pose"]
        return cls(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                   int(k["width"]), int(k["height"]), np.asarray(p["R"], dtype=float).reshape(3, 3),
                   np.asarray(p["t"], dtype=float))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf


def project(camera: CameraModel, points):
    """World points to pixel coordinates ``(u, v)`` and camera depth ``s``."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    Pc = (P - camera.t) @ camera.R
    s = Pc[:, 2]
    if np.any(s <= 0):
        raise ValueError("point behind the camera")
    u = camera.fx * Pc[:, 0] / s + camera.cx
    v = camera.fy * Pc[:, 1] / s + camera.cy
    return u, v, s


def _directions(camera: CameraModel, u, v):
    dc = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    dc /= np.linalg.norm(dc, axis=-1, keepdims=True)
    return dc @ camera.R.T


def pixel_ray(camera: CameraModel, u: float, v: float) -> Ray:
    d = _directions(camera, np.atleast_1d(float(u)), np.atleast_1d(float(v)))[0]
    return Ray(camera.t.copy(), d)


def pixel_rays(camera: CameraModel):
    """Origins and unit directions through every pixel centre, row-major."""
    jj, ii = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    dirs = _directions(camera, jj.ravel(), ii.ravel())
    return np.broadcast_to(camera.t, dirs.shape).copy(), dirs


def ray_box_bounds(origins, dirs, lo, hi):
    """Slab intersection: ``(t_min, t_max, valid)`` per ray, clipped at 0."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tn = np.nanmax(np.minimum(t1, t2), axis=1)
    tf = np.nanmin(np.maximum(t1, t2), axis=1)
    tn = np.maximum(tn, 0.0)
    return tn, tf, tf > tn


# ----------------------------------------------------------------------------
# field sources


class ModelSource:
    """Adapter exposing a fitted model as ``sdf`` and ``color`` callables."""

    def __init__(self, model: GpdfModel, refine_iters: int = 0):
        self.model = model
        self.refine_iters = refine_iters

    def sdf(self, P):
        if self.refine_iters:
            from .field import distance

            return distance(self.model, P, self.refine_iters)
        return distance_derivatives(self.model, P, order=1)[0]

    def color(self, P):
        if self.model.feature_table is None:
            return np.full((len(P), 3), 0.5)
        return infer_feature_field(self.model, P)[:, :3]


def _as_source(source, refine_iters=0):
    return ModelSource(source, refine_iters) if isinstance(source, GpdfModel) else source


# ----------------------------------------------------------------------------
# sphere tracing


@dataclass
class TraceHit:
    point: np.ndarray
    distance: float
    steps: int


def sphere_trace(sdf, ray: Ray, hit_eps: float = 1e-4, max_steps: int = 256):
    """March ``ray`` by the queried distance until ``|d| < hit_eps``.

    Returns ``None`` on a miss (``t_max`` or ``max_steps`` reached).
    """
    if hit_eps <= 0:
        raise ValueError("hit_eps must be positive")
    t = float(ray.t_min)
    for step in range(max_steps):
        x = ray.origin + t * ray.direction
        d = float(np.asarray(sdf(x[None, :])).ravel()[0])
        if abs(d) < hit_eps:
            return TraceHit(x, t, step)
        t += d
        if t > ray.t_max or t < ray.t_min - hit_eps:
            return None
    return None


def sphere_trace_batch(sdf, origins, dirs, t_min, t_max, hit_eps: float = 1e-4, max_steps: int = 256):
    """Vectorized sphere tracing; returns ``(depth, hit)`` with depth 0 on misses."""
    n = len(origins)
    t = np.array(t_min, dtype=float, copy=True)
    t_max = np.asarray(t_max, dtype=float)
    active = t < t_max
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = np.asarray(sdf(origins[idx] + t[idx, None] * dirs[idx])).ravel()
        done = np.abs(d) < hit_eps
        hit[idx[done]] = True
        active[idx[done]] = False
        move = idx[~done]
        t[move] += d[~done]
        active[move[(t[move] > t_max[move]) | (t[move] < 0)]] = False
    return np.where(hit, t, 0.0), hit


# ----------------------------------------------------------------------------
# volumetric rendering


@dataclass
class RenderedImage:
    color: np.ndarray
    depth: np.ndarray
    color_var: np.ndarray
    depth_var: np.ndarray
    hit_mask: np.ndarray
    weight_sum: np.ndarray
    sample_spacing: np.ndarray


def default_sharpness(length_scale: float) -> float:
    return 200.0 / length_scale


def _ray_samples(camera, box, n_samples):
    origins, dirs = pixel_rays(camera)
    tn, tf, valid = ray_box_bounds(origins, dirs, box[0], box[1])
    u = np.linspace(0.0, 1.0, n_samples)
    t = tn[:, None] + (tf - tn)[:, None] * u[None, :]
    t[~valid] = 0.0
    return origins, dirs, t, valid


def _composite(dvals, tvals, cvals, s):
    """Weights and composites for rays x samples arrays."""
    Phi = np.maximum(expit(s * dvals), PHI_FLOOR)
    alpha = np.maximum(1.0 - Phi[:, 1:] / Phi[:, :-1], 0.0)
    T = np.ones_like(Phi)
    T[:, 1:] = np.cumprod(1.0 - alpha, axis=1)
    w = T[:, :-1] * alpha
    C = np.einsum("ri,ric->rc", w, cvals[:, :-1])
    Dh = np.einsum("ri,ri->r", w, tvals[:, :-1])
    return Phi, alpha, T, w, C, Dh


def render_volumetric(
    source,
    camera: CameraModel,
    box,
    n_samples: int = 64,
    sharpness: float | None = None,
    depth_mode: str = "ray",
    refine_iters: int = 0,
) -> RenderedImage:
    """Render colour, depth and their variances for every pixel.

    ``source`` is a fitted model or any object with ``sdf(P)`` and
    ``color(P)`` methods.  ``box`` is ``(lo, hi)`` of the workspace; rays
    only sample inside it.  ``depth_mode="sdf"`` composites the sampled
    distance values instead of the ray parameter.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    src = _as_source(source, refine_iters)
    if sharpness is None:
        l = source.kernel.length_scale if isinstance(source, GpdfModel) else 0.1
        sharpness = default_sharpness(l)
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    origins, dirs, t, valid = _ray_samples(camera, box, n_samples)
    R = len(origins)
    dvals = np.full((R, n_samples), 1e6)
    cvals = np.zeros((R, n_samples, 3))
    if np.any(valid):
        P = (origins[valid, None, :] + t[valid, :, None] * dirs[valid, None, :]).reshape(-1, 3)
        dvals[valid] = np.asarray(src.sdf(P)).reshape(-1, n_samples)
        cvals[valid] = np.asarray(src.color(P)).reshape(-1, n_samples, 3)
    if depth_mode == "ray":
        tv = t
    elif depth_mode == "sdf":
        tv = dvals
    else:
        raise ValueError("depth_mode must be 'ray' or 'sdf'")
    _, _, _, w, C, Dh = _composite(dvals, tv, cvals, sharpness)
    cvar = np.einsum("ri,ric->rc", w, (cvals[:, :-1] - C[:, None, :]) ** 2)
    dvar = np.einsum("ri,ri->r", w, (tv[:, :-1] - Dh[:, None]) ** 2)
    wsum = w.sum(axis=1)
    H, W = camera.height, camera.width
    spacing = np.where(valid, (t[:, -1] - t[:, 0]) / (n_samples - 1), 0.0)
    hit = wsum > 0.5
    return RenderedImage(
        color=np.clip(C, 0.0, 1.0).reshape(H, W, 3),
        depth=Dh.reshape(H, W),
        color_var=np.maximum(cvar, 0.0).reshape(H, W, 3),
        depth_var=np.maximum(dvar, 0.0).reshape(H, W),
        hit_mask=hit.reshape(H, W),
        weight_sum=wsum.reshape(H, W),
        sample_spacing=spacing.reshape(H, W),
    )


def transmittance_partition(source, camera, box, n_samples=64, sharpness=None):
    """Per-ray ``sum_i T_i alpha_i + T_final``; equals one up to rounding."""
    src = _as_source(source)
    if sharpness is None:
        sharpness = default_sharpness(source.kernel.length_scale if isinstance(source, GpdfModel) else 0.1)
    origins, dirs, t, valid = _ray_samples(camera, box, n_samples)
    dvals = np.full(t.shape, 1e6)
    if np.any(valid):
        P = (origins[valid, None, :] + t[valid, :, None] * dirs[valid, None, :]).reshape(-1, 3)
        dvals[valid] = np.asarray(src.sdf(P)).reshape(-1, n_samples)
    _, alpha, T, w, _, _ = _composite(dvals, t, np.zeros(t.shape + (3,)), sharpness)
    return w.sum(axis=1) + T[:, -1], alpha


# ----------------------------------------------------------------------------
# render-based optimisation


@dataclass
class RenderView:
    camera: CameraModel
    color: np.ndarray | None = None  # H x W x 3
    depth: np.ndarray | None = None  # H x W


@dataclass
class _ViewCache:
    P: np.ndarray
    t: np.ndarray
    valid: np.ndarray


def _prepare_views(views, box, n_samples):
    out = []
    for v in views:
        origins, dirs, t, valid = _ray_samples(v.camera, box, n_samples)
        P = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        out.append(_ViewCache(P, t, valid))
    return out


def render_loss(
    X,
    F,
    kernel: KernelConfig,
    noise_diag,
    views,
    box,
    n_samples: int = 64,
    sharpness: float | None = None,
    color_weight: float = 1.0,
    depth_weight: float = 1.0,
    with_grad: bool = True,
    _cache=None,
):
    """Mean squared image error over views and its gradient.

    Returns ``(loss, dL/dX, dL/dF)``.  The gradient is exact: it runs the
    chain rule back through compositing, the sigmoid, the reverting function,
    the kernel rows at the samples, and the weight solves
    ``w = G^-1 1``, ``v = G^-1 F`` with ``G = K(X, X) + D``.
    """
    X = np.asarray(X, dtype=float)
    F = np.asarray(F, dtype=float)
    n = len(X)
    s = default_sharpness(kernel.length_scale) if sharpness is None else sharpness
    G = kernel_matrix(X, X, kernel) + np.diag(noise_diag)
    cG = linalg.cho_factor(G, lower=True, check_finite=False)
    wv = linalg.cho_solve(cG, np.c_[np.ones(n), F], check_finite=False)
    w, v = wv[:, 0], wv[:, 1:]
    caches = _cache if _cache is not None else _prepare_views(views, box, n_samples)
    n_pix = sum(view.camera.width * view.camera.height for view in views)

    loss = 0.0
    gw = np.zeros(n)
    gv = np.zeros_like(v)
    gX = np.zeros_like(X)
    for view, cache in zip(views, caches):
        Rn, N = cache.t.shape
        valid = cache.valid
        dvals = np.full((Rn, N), 1e6)
        cvals = np.zeros((Rn, N, 3))
        P = cache.P[valid].reshape(-1, 3)
        dist = cdist(P, X)
        K, K1, _ = kernel_derivatives(dist, kernel)
        o = np.maximum(K @ w, 1e-300)
        r, r1, _ = revert_derivatives(o, kernel)
        dvals[valid] = r.reshape(-1, N)
        cvals[valid] = (K @ v).reshape(-1, N, 3)
        Phi, alpha, T, wt, C, Dh = _composite(dvals, cache.t, cvals, s)
        gC = np.zeros_like(C)
        gD = np.zeros_like(Dh)
        if view.color is not None:
            res = C - view.color.reshape(-1, 3)
            loss += color_weight * np.sum(res**2) / n_pix
            gC = 2.0 * color_weight * res / n_pix
        if view.depth is not None:
            res = Dh - view.depth.ravel()
            loss += depth_weight * np.sum(res**2) / n_pix
            gD = 2.0 * depth_weight * res / n_pix
        if not with_grad:
            continue
        e = np.einsum("rc,ric->ri", gC, cvals[:, :-1]) + gD[:, None] * cache.t[:, :-1]
        we = wt * e
        after = np.cumsum(we[:, ::-1], axis=1)[:, ::-1] - we  # sum over i > k
        g_alpha = T[:, :-1] * e - after / np.maximum(1.0 - alpha, 1e-12)
        g_alpha = np.where(alpha > 0, g_alpha, 0.0)
        g_phi = np.zeros_like(Phi)
        g_phi[:, :-1] += g_alpha * Phi[:, 1:] / Phi[:, :-1] ** 2
        g_phi[:, 1:] -= g_alpha / Phi[:, :-1]
        raw = expit(s * dvals)
        g_d = g_phi * np.where(raw > PHI_FLOOR, s * raw * (1.0 - raw), 0.0)
        g_c = np.zeros_like(cvals)
        g_c[:, :-1] = wt[:, :, None] * gC[:, None, :]
        g_o = (g_d[valid].ravel()) * r1
        g_cs = g_c[valid].reshape(-1, 3)
        # samples past saturation carry exactly zero adjoint; skip their rows
        live = np.flatnonzero((g_o != 0) | np.any(g_cs != 0, axis=1))
        g_o, g_cs = g_o[live], g_cs[live]
        K, K1, dist, P = K[live], K1[live], dist[live], P[live]
        gw += K.T @ g_o
        gv += K.T @ g_cs
        # direct dependence of k(P, X_j) on X_j
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0, K1 / dist, 0.0)
        coef *= g_o[:, None] * w[None, :] + g_cs @ v.T
        gX += -(coef.T @ P) + coef.sum(axis=0)[:, None] * X
    if not with_grad:
        return loss, None, None
    lam = linalg.cho_solve(cG, np.c_[gw, gv], check_finite=False)
    lam_w, lam_v = lam[:, 0], lam[:, 1:]
    M = -(np.outer(lam_w, w) + lam_v @ v.T)
    S = M + M.T
    diffXX = X[:, None, :] - X[None, :, :]
    dXX = np.linalg.norm(diffXX, axis=2)
    _, K1XX, _ = kernel_derivatives(dXX, kernel)
    with np.errstate(divide="ignore", invalid="ignore"):
        kdXX = np.where(dXX > 0, K1XX / dXX, 0.0)
    gX += np.einsum("ij,ijk->ik", S * kdXX, diffXX)
    return loss, gX, lam_v


@dataclass
class RenderOptimization:
    model: GpdfModel
    loss_trace: list
    accepted: int
    rejected: int


def optimize_by_rendering(
    model: GpdfModel,
    views,
    box,
    iterations: int = 500,
    step: float | None = None,
    n_samples: int = 64,
    sharpness: float | None = None,
    color_weight: float = 1.0,
    depth_weight: float = 1.0,
    optimize_colors: bool = True,
    tol: float = 0.0,
    window: int = 10,
    callback=None,
) -> RenderOptimization:
    """Adjust training point positions (and colours) to match reference views.

    Uses Adam-style steps; a step is kept only if the loss does not rise and
    is finite, otherwise it is retried at half the step size.  With ``tol``
    set, stops once the loss fell by less than ``tol`` (relative) per step
    on average over the last ``window`` accepted steps.  The returned trace
    holds the loss after every accepted step.
    """
    if model.noise.mode is not NoiseMode.SCALAR_OBSERVATION:
        raise ValueError("render optimisation keeps the noise diagonal fixed; use scalar noise")
    X = model.X.copy()
    F = (model.feature_table[:, :3].copy() if model.feature_table is not None
         else np.full((model.n, 3), 0.5))
    Dd = model.D_diag.copy()
    kernel = model.kernel
    lr = 0.05 * kernel.length_scale if step is None else step
    cache = _prepare_views(views, box, n_samples)
    kw = dict(n_samples=n_samples, sharpness=sharpness, color_weight=color_weight,
              depth_weight=depth_weight, _cache=cache)
    loss, gX, gF = render_loss(X, F, kernel, Dd, views, box, **kw)
    trace = [loss]
    mX = np.zeros_like(X)
    vX = np.zeros_like(X)
    mF = np.zeros_like(F)
    vF = np.zeros_like(F)
    b1, b2, eps = 0.9, 0.999, 1e-12
    accepted = rejected = 0
    k = 0
    for _ in range(iterations):
        if loss == 0.0:
            break
        k += 1
        mX_n = b1 * mX + (1 - b1) * gX
        vX_n = b2 * vX + (1 - b2) * gX**2
        mF_n = b1 * mF + (1 - b1) * gF
        vF_n = b2 * vF + (1 - b2) * gF**2
        dX = (mX_n / (1 - b1**k)) / (np.sqrt(vX_n / (1 - b2**k)) + eps)
        dF = (mF_n / (1 - b1**k)) / (np.sqrt(vF_n / (1 - b2**k)) + eps)
        Xc = X - lr * dX
        Fc = np.clip(F - lr * dF, 0.0, 1.0) if optimize_colors else F
        try:
            lc, gXc, gFc = render_loss(Xc, Fc, kernel, Dd, views, box, **kw)
        except (np.linalg.LinAlgError, ValueError):
            lc = np.inf
        if np.isfinite(lc) and lc <= loss:
            X, F, loss, gX, gF = Xc, Fc, lc, gXc, gFc
            mX, vX, mF, vF = mX_n, vX_n, mF_n, vF_n
            trace.append(loss)
            accepted += 1
            if callback is not None:
                callback(accepted, X, loss)
            if tol > 0 and accepted >= window and trace[-1 - window] - loss <= tol * window * loss:
                break
        else:
            lr *= 0.5
            rejected += 1
            k -= 1
    feats = F if model.feature_table is None else np.c_[F, model.feature_table[:, 3:]]
    new_model = fit(X, kernel, model.noise, features=feats, point_var=model.point_var)
    return RenderOptimization(new_model, trace, accepted, rejected)
