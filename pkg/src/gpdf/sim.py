"""Analytic scenes, virtual sensors and the closed-loop exploration harness.

Scenes are min-unions of spheres, boxes and capsules with exact signed
distances.  The virtual RGBD camera sphere-traces the scene and corrupts
depth with noise whose standard deviation grows with depth squared; the
virtual tactile probe marches along an approach direction to the first
contact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .downsample import EmitMode, VoxelGrid, accumulate, emit_samples
from .explore import (
    Ensemble,
    information_gain,
    most_uncertain_surface_point,
    surface_variance,
    touch_reference,
)
from .field import GpdfModel, NoiseMode, NoiseModel, distance, fit
from .kernels import KernelConfig
from .render import CameraModel, optimize_by_rendering, pixel_rays, ray_box_bounds, sphere_trace_batch, RenderView
from .updates import add_points


class NoContactError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# scenes


@dataclass
class Primitive:
    kind: str
    params: dict
    color: tuple = (0.5, 0.5, 0.5)
    material: str = "default"
    noise_multiplier: float = 1.0

    def __post_init__(self):
        p = self.params
        if self.kind == "sphere":
            self.params = {"center": np.asarray(p["center"], dtype=float), "radius": float(p["radius"])}
            if self.params["radius"] <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind == "box":
            self.params = {"center": np.asarray(p["center"], dtype=float),
                           "half_extents": np.asarray(p["half_extents"], dtype=float)}
            if np.any(self.params["half_extents"] <= 0):
                raise ValueError("box half extents must be positive")
        elif self.kind == "capsule":
            self.params = {"a": np.asarray(p["a"], dtype=float), "b": np.asarray(p["b"], dtype=float),
                           "radius": float(p["radius"])}
            if self.params["radius"] <= 0:
                raise ValueError("capsule radius must be positive")
        else:
            raise ValueError(f"unknown primitive type {self.kind!r}")
        self.color = tuple(float(c) for c in self.color)

    def sdf(self, P):
        P = np.atleast_2d(P)
        p = self.params
        if self.kind == "sphere":
            return np.linalg.norm(P - p["center"], axis=1) - p["radius"]
        if self.kind == "box":
            q = np.abs(P - p["center"]) - p["half_extents"]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        a, b = p["a"], p["b"]
        ab = b - a
        denom = float(ab @ ab)
        h = np.zeros(len(P)) if denom == 0 else np.clip((P - a) @ ab / denom, 0.0, 1.0)
        return np.linalg.norm(P - a - h[:, None] * ab, axis=1) - p["radius"]

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()},
            "color": list(self.color),
            "material": self.material,
            "noise_multiplier": self.noise_multiplier,
        }


@dataclass
class AnalyticScene:
    primitives: list
    workspace_box: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        lo, hi = (np.asarray(b, dtype=float) for b in self.workspace_box)
        if np.any(hi <= lo):
            raise ValueError("workspace box must have hi > lo")
        self.workspace_box = (lo, hi)

    def sdf(self, P):
        return scene_sdf(self, P)[0]

    def color(self, P):
        _, ids = scene_sdf(self, P)
        table = np.array([p.color for p in self.primitives])
        return table[ids]

    def normal(self, P, h: float = 1e-6):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        g = np.empty_like(P)
        for k in range(P.shape[1]):
            e = np.zeros(P.shape[1])
            e[k] = h
            g[:, k] = (self.sdf(P + e) - self.sdf(P - e)) / (2 * h)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    @property
    def diameter(self) -> float:
        lo, hi = self.workspace_box
        return float(np.linalg.norm(hi - lo))

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives],
                "workspace_box": [self.workspace_box[0].tolist(), self.workspace_box[1].tolist()]}

    @classmethod
    def from_dict(cls, data: dict) -> "AnalyticScene":
        unknown = set(data) - {"primitives", "workspace_box"}
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        prims = []
        for item in data["primitives"]:
            extra = set(item) - {"type", "params", "color", "material", "noise_multiplier"}
            if extra:
                raise ConfigError(f"unknown primitive keys: {sorted(extra)}")
            prims.append(Primitive(item["type"], item["params"], tuple(item.get("color", (0.5, 0.5, 0.5))),
                                   item.get("material", "default"), float(item.get("noise_multiplier", 1.0))))
        box = data.get("workspace_box", ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
        return cls(prims, tuple(box))


def scene_sdf(scene: AnalyticScene, x):
    """Signed distance to the union and the index of the nearest primitive."""
    P = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(P)):
        raise ValueError("query points must be finite")
    D = np.stack([p.sdf(P) for p in scene.primitives])
    ids = np.argmin(D, axis=0)
    return D[ids, np.arange(len(P))], ids


def sphere_scene(radius=0.1, center=(0.0, 0.0, 0.0), color=(0.8, 0.2, 0.2), margin=2.0) -> AnalyticScene:
    c = np.asarray(center, dtype=float)
    return AnalyticScene([Primitive("sphere", {"center": c, "radius": radius}, color, "sphere")],
                         (tuple(c - margin * radius), tuple(c + margin * radius)))


# ----------------------------------------------------------------------------
# sensors


@dataclass
class RGBDFrame:
    color: np.ndarray
    depth: np.ndarray  # distance along the pixel ray, 0 on misses
    hit_mask: np.ndarray
    points: np.ndarray
    point_colors: np.ndarray
    point_sigma: np.ndarray  # per-point standard deviation (isotropic bound)
    primitive_ids: np.ndarray
    camera: CameraModel


def virtual_rgbd(scene: AnalyticScene, camera: CameraModel, noise_coeff: float = 0.0, rng=None,
                 hit_eps: float = 1e-7) -> RGBDFrame:
    """Sphere-trace every pixel and add depth noise with ``sigma = c * depth**2``.

    One standard normal draw is consumed per pixel in row-major order, hit or
    not, so the noise stream does not depend on the scene.
    """
    if noise_coeff < 0:
        raise ValueError("noise_coeff must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    origins, dirs = pixel_rays(camera)
    lo, hi = scene.workspace_box
    tn, tf, valid = ray_box_bounds(origins, dirs, lo, hi)
    tf = np.where(valid, tf, 0.0)
    depth, hit = sphere_trace_batch(scene.sdf, origins, dirs, np.where(valid, tn, 0.0), tf, hit_eps=hit_eps)
    hit &= valid
    z = rng.standard_normal(len(depth))
    P_true = origins + depth[:, None] * dirs
    _, ids = scene_sdf(scene, P_true)
    mult = np.array([p.noise_multiplier for p in scene.primitives])[ids]
    sigma = noise_coeff * depth**2 * mult
    noisy = np.where(hit, depth + sigma * z, 0.0)
    colors = np.where(hit[:, None], scene.color(P_true), 0.0)
    pts = origins + noisy[:, None] * dirs
    H, W = camera.height, camera.width
    return RGBDFrame(
        color=colors.reshape(H, W, 3),
        depth=noisy.reshape(H, W),
        hit_mask=hit.reshape(H, W),
        points=pts[hit],
        point_colors=colors[hit],
        point_sigma=sigma[hit],
        primitive_ids=ids[hit],
        camera=camera,
    )


@dataclass
class Contact:
    point: np.ndarray
    normal: np.ndarray
    material: str


def virtual_touch(scene: AnalyticScene, approach_point, approach_normal, travel: float | None = None,
                  tol: float = 1e-9, noise_sigma: float = 5e-4, rng=None, max_steps: int = 512) -> Contact:
    """Move from ``approach_point`` along ``-approach_normal`` until contact."""
    x0 = np.asarray(approach_point, dtype=float)
    n = np.asarray(approach_normal, dtype=float)
    n = n / np.linalg.norm(n)
    travel = scene.diameter if travel is None else travel
    t = 0.0
    hit = None
    for _ in range(max_steps):
        x = x0 - t * n
        d = float(scene.sdf(x[None, :])[0])
        if abs(d) < tol:
            hit = x
            break
        t += d
        if t > travel or t < -tol:
            break
    if hit is None:
        raise NoContactError("probe made no contact within its travel limit")
    _, ids = scene_sdf(scene, hit)
    normal = scene.normal(hit)[0]
    if noise_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        hit = hit + noise_sigma * rng.standard_normal(3)
    return Contact(hit, normal, scene.primitives[int(ids[0])].material)


# ----------------------------------------------------------------------------
# exploration harness


DEFAULT_CONFIG = {
    "scene": None,
    "camera": {"width": 32, "height": 24, "fov_deg": 60.0},
    "initial_pose": None,
    "candidates": None,
    "thresholds": {"ig_stop": 0.0, "var_stop": 0.0},
    "budgets": {"views": 2, "touches": 3, "render_iterations": 0},
    "noise_coeff": 0.01,
    "seed": 0,
    "length_scale": None,
    "ensemble_multipliers": [0.5, 1.0, 2.0],
    "voxel_size": None,
    "n_samples": 32,
    "touch_noise": 5e-4,
    "touch_starts": 64,
    "view_radius": None,
    "vision_update": "points",
    "sigma_y2": 1e-4,
}

_NESTED = {"camera": {"width", "height", "fov_deg"},
           "thresholds": {"ig_stop", "var_stop"},
           "budgets": {"views", "touches", "render_iterations"}}


def validate_config(config: dict) -> dict:
    """Merge with defaults and reject unknown or malformed entries."""
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(config) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in config.items():
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            bad = set(value) - _NESTED[key]
            if bad:
                raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["scene"] is None:
        raise ConfigError("config needs a scene")
    try:
        cfg["_scene"] = (cfg["scene"] if isinstance(cfg["scene"], AnalyticScene)
                         else AnalyticScene.from_dict(cfg["scene"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene: {exc}") from None
    for key in ("views", "touches", "render_iterations"):
        v = cfg["budgets"][key]
        if not isinstance(v, int) or v < 0:
            raise ConfigError(f"budgets.{key} must be a non-negative integer")
    if not (isinstance(cfg["seed"], int) and cfg["seed"] >= 0):
        raise ConfigError("seed must be a non-negative integer")
    if cfg["noise_coeff"] < 0:
        raise ConfigError("noise_coeff must be non-negative")
    if cfg["vision_update"] not in ("render", "points"):
        raise ConfigError("vision_update must be 'render' or 'points'")
    if not cfg["ensemble_multipliers"]:
        raise ConfigError("ensemble_multipliers must be non-empty")
    return cfg


def view_sphere(center, radius, n_azimuth=8, elevations_deg=(20.0, -20.0), width=32, height=24, fov_deg=60.0):
    """Cameras on a sphere around ``center`` looking at it."""
    center = np.asarray(center, dtype=float)
    cams = []
    for el in elevations_deg:
        e = np.deg2rad(el)
        for k in range(n_azimuth):
            az = 2 * np.pi * k / n_azimuth
            pos = center + radius * np.array([np.cos(az) * np.cos(e), np.sin(az) * np.cos(e), np.sin(e)])
            cams.append(CameraModel.look_at(pos, center, width=width, height=height, fov_deg=fov_deg))
    return cams


def _pose_to_camera(pose, cam_cfg, center):
    if isinstance(pose, CameraModel):
        return pose
    if "intrinsics" in pose:
        return CameraModel.from_dict(pose)
    return CameraModel.look_at(pose["position"], pose.get("target", center), width=cam_cfg["width"],
                               height=cam_cfg["height"], fov_deg=cam_cfg["fov_deg"])


@dataclass
class ExplorationResult:
    metrics: list
    model: GpdfModel
    ensemble: Ensemble
    frames: list = field(default_factory=list)
    touches: list = field(default_factory=list)


def _fit_members(X, Sx, colors, l, multipliers, sigma_y2=None):
    # per-point input noise when aggregating points; scalar noise when the
    # members are later moved by render optimisation
    if sigma_y2 is None:
        noise = NoiseModel(NoiseMode.NOISY_INPUT, sigma_y2=1e-6, sigma_x=(0.0, 0.0, 0.0), refit_iterations=2)
        kw = {"input_var": Sx}
    else:
        noise, kw = NoiseModel(NoiseMode.SCALAR_OBSERVATION, sigma_y2), {}
    return Ensemble([
        fit(X, KernelConfig("matern_half", l * float(m)), noise, features=colors, **kw)
        for m in multipliers
    ])


def _fmt(x):
    return [float(v) for v in np.asarray(x, dtype=float).ravel()]


def surface_probe_points(scene: AnalyticScene, n: int = 400):
    """Fixed points on the true surface along a Fibonacci set of directions.

    Found by bisection outward from the workspace centre, so only
    star-shaped parts of the scene are covered.
    """
    lo, hi = scene.workspace_box
    c = 0.5 * (lo + hi)
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5**0.5) * i
    dirs = np.c_[np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)]
    # bisection on the sdf along every direction at once
    t_lo, t_hi = np.zeros(n), np.full(n, scene.diameter)
    for _ in range(60):
        mid = 0.5 * (t_lo + t_hi)
        inside = scene.sdf(c + mid[:, None] * dirs) < 0
        t_lo = np.where(inside, mid, t_lo)
        t_hi = np.where(inside, t_hi, mid)
    return c + (0.5 * (t_lo + t_hi))[:, None] * dirs


def surface_max_variance(model: GpdfModel, scene: AnalyticScene, n: int = 400, probes=None):
    """Largest occupancy variance over fixed points on the true surface.

    Fixed probes make successive models comparable: with the kernel held
    fixed, adding observations can only lower the variance at each probe.
    """
    P = surface_probe_points(scene, n) if probes is None else probes
    return float(surface_variance(model, P).max())


def run_exploration(config: dict, log_path=None, snapshot_dir=None) -> ExplorationResult:
    """Vision next-best-view loop followed by a touch loop.

    The ensemble is initialised from the first view's voxel-downsampled
    points.  With ``vision_update="render"`` the point count then stays
    fixed: every member is refined by render optimisation against all views
    captured so far.  With ``"points"`` each new view's points are merged
    into the voxel grid and the members are refitted.  Touches are added to
    the middle member as low-noise points.

    Every step appends one JSON line
    ``{step, phase, chosen_pose_or_point, max_ig, max_surface_var}``.
    """
    cfg = validate_config(config)
    scene: AnalyticScene = cfg["_scene"]
    rng = np.random.default_rng(cfg["seed"])
    lo, hi = scene.workspace_box
    center = 0.5 * (lo + hi)
    box = (lo, hi)
    cam_cfg = cfg["camera"]
    # far enough that the whole workspace box fits in the field of view
    half_diag = 0.5 * float(np.linalg.norm(hi - lo))
    radius = cfg["view_radius"] or 1.1 * half_diag / np.tan(np.deg2rad(0.5 * cam_cfg["fov_deg"]))
    if cfg["candidates"] is None:
        candidates = view_sphere(center, radius, width=cam_cfg["width"], height=cam_cfg["height"],
                                 fov_deg=cam_cfg["fov_deg"])
    else:
        candidates = [_pose_to_camera(p, cam_cfg, center) for p in cfg["candidates"]]
    if not candidates:
        raise ConfigError("no candidate poses")
    initial = candidates[0] if cfg["initial_pose"] is None else _pose_to_camera(cfg["initial_pose"], cam_cfg, center)
    l = cfg["length_scale"] or 0.1 * float(np.linalg.norm(hi - lo))
    voxel = cfg["voxel_size"] or 0.25 * l
    by_render = cfg["vision_update"] == "render"
    sigma_y2 = cfg["sigma_y2"] if by_render else None
    mults = cfg["ensemble_multipliers"]

    probes = surface_probe_points(scene)
    metrics = []
    log = open(log_path, "w") if log_path is not None else None

    def emit(entry):
        metrics.append(entry)
        if log is not None:
            log.write(json.dumps(entry) + "\n")
            log.flush()

    grid = VoxelGrid(voxel, lo.copy())
    color_grid = {}

    def ingest(frame):
        if len(frame.points) == 0:
            return
        # inverse-variance weights so that noisier far points count less
        w = 1.0 / np.maximum(frame.point_sigma, 1e-6) ** 2
        accumulate(grid, frame.points, w)
        keys = np.floor((frame.points - grid.origin) / grid.voxel_size).astype(np.int64)
        for key, col in zip(map(tuple, keys), frame.point_colors):
            acc = color_grid.setdefault(key, [np.zeros(3), 0])
            acc[0] += col
            acc[1] += 1

    def training_set():
        em = emit_samples(grid, EmitMode.MEAN_ONLY)
        keys = sorted(grid.cells)
        cols = np.array([color_grid[k][0] / color_grid[k][1] for k in keys])
        sig = np.array([np.sqrt(1.0 / grid.cells[k].weight) for k in keys])
        Sx = np.repeat((sig**2)[:, None], 3, axis=1) + 1e-8
        return em.points, Sx, cols

    try:
        frames = [virtual_rgbd(scene, initial, cfg["noise_coeff"], rng)]
        ingest(frames[0])
        if len(grid) == 0:
            raise ConfigError("initial pose sees nothing of the scene")
        X, Sx, cols = training_set()
        ens = _fit_members(X, Sx, cols, l, mults, sigma_y2)
        if by_render:
            ens = _render_refine(ens, frames, box, cfg)
        base = ens.members[len(mults) // 2]
        emit({"step": 0, "phase": "vision", "chosen_pose_or_point": _fmt(initial.position),
              "max_ig": None, "max_surface_var": surface_max_variance(base, scene, probes=probes)})
        step = 0
        for _ in range(cfg["budgets"]["views"]):
            gains = np.array([information_gain(ens, c, box, n_samples=cfg["n_samples"])[0] for c in candidates])
            best = int(np.argmax(gains))
            if gains[best] < cfg["thresholds"]["ig_stop"]:
                break
            frame = virtual_rgbd(scene, candidates[best], cfg["noise_coeff"], rng)
            frames.append(frame)
            if by_render:
                ens = _render_refine(ens, frames, box, cfg)
            else:
                ingest(frame)
                X, Sx, cols = training_set()
                ens = _fit_members(X, Sx, cols, l, mults)
            base = ens.members[len(mults) // 2]
            step += 1
            emit({"step": step, "phase": "vision", "chosen_pose_or_point": _fmt(candidates[best].position),
                  "max_ig": float(gains[best]), "max_surface_var": surface_max_variance(base, scene, probes=probes)})
        touches = []
        touch_var = (cfg["touch_noise"] / base.kernel.length_scale) ** 2 + 1e-8
        for _ in range(cfg["budgets"]["touches"]):
            target = most_uncertain_surface_point(base, n_starts=cfg["touch_starts"], box=box, rng=rng)
            if target.variance < cfg["thresholds"]["var_stop"]:
                break
            # the probe comes in along the target normal from the workspace
            # boundary, so a target on a spurious inner sheet still gets a
            # physically reachable approach
            n_t = target.normal / np.linalg.norm(target.normal)
            tf = ray_box_bounds(target.point[None, :], n_t[None, :], lo, hi)[1][0]
            start = target.point + max(tf, 0.0) * n_t
            try:
                contact = virtual_touch(scene, start, n_t, noise_sigma=cfg["touch_noise"], rng=rng)
            except NoContactError:
                contact = None
            if contact is not None:
                touches.append(contact)
                feats = scene.color(contact.point[None, :])
                base = add_points(base, contact.point[None, :], point_var2=[touch_var], features2=feats)
            step += 1
            emit({"step": step, "phase": "touch", "chosen_pose_or_point": _fmt(target.point),
                  "max_ig": None, "max_surface_var": surface_max_variance(base, scene, probes=probes)})
        ens.members[len(mults) // 2] = base
    finally:
        if log is not None:
            log.close()
    if snapshot_dir is not None:
        _write_snapshots(snapshot_dir, frames)
    return ExplorationResult(metrics, base, ens, frames, touches)


def _render_refine(ens, frames, box, cfg):
    iters = cfg["budgets"]["render_iterations"]
    if iters == 0:
        return ens
    views = [RenderView(f.camera, f.color, f.depth) for f in frames]
    return Ensemble([
        optimize_by_rendering(m, views, box, iterations=iters, n_samples=cfg["n_samples"]).model
        for m in ens.members
    ])


def _write_snapshots(directory, frames):
    from pathlib import Path

    from .io import write_pfm, write_ppm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(frames):
        write_ppm(d / f"view_{k:03d}.ppm", f.color)
        write_pfm(d / f"view_{k:03d}_depth.pfm", f.depth)


def surface_rms_error(model: GpdfModel, scene: AnalyticScene, n: int = 400, refine_iters: int = 5):
    """RMS of the fitted distance at points on the true surface."""
    P = surface_probe_points(scene, n)
    return float(np.sqrt(np.mean(distance(model, P, refine_iters) ** 2)))
