"""Gaussian process distance field: fitting, queries and derivatives.

The model is a GP over a pseudo-occupancy that equals one at every observed
surface point.  The posterior mean is pushed through the kernel's reverting
function to obtain a distance; with the exponential kernel the interior
(occupancy above one) maps to negative distances.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .kernels import KernelConfig, KernelKind, kernel_derivatives, kernel_matrix, revert_derivatives

_CHUNK_ELEMS = 2_000_000


class FactorizationError(np.linalg.LinAlgError):
    pass


class NoiseMode(str, Enum):
    SCALAR_OBSERVATION = "scalar_observation"
    NOISY_INPUT = "noisy_input"


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise (``sigma_y2``) or first-order input noise (``sigma_x``).

    In noisy-input mode the diagonal noise is ``g_i^T Sigma_x g_i`` with
    ``g_i`` the posterior mean gradient at training point ``i``, rebuilt over
    ``refit_iterations`` rounds starting from ``initial_jitter``.
    """

    mode: NoiseMode = NoiseMode.SCALAR_OBSERVATION
    sigma_y2: float = 0.0
    sigma_x: tuple = (0.0, 0.0, 0.0)
    refit_iterations: int = 2
    initial_jitter: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mode", NoiseMode(self.mode))
        object.__setattr__(self, "sigma_x", tuple(float(v) for v in self.sigma_x))
        if self.sigma_y2 < 0 or any(v < 0 for v in self.sigma_x):
            raise ValueError("noise variances must be non-negative")
        if self.refit_iterations < 0:
            raise ValueError("refit_iterations must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "sigma_y2": self.sigma_y2,
            "sigma_x": list(self.sigma_x),
            "refit_iterations": self.refit_iterations,
            "initial_jitter": self.initial_jitter,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(
            NoiseMode(data.get("mode", "scalar_observation")),
            float(data.get("sigma_y2", 0.0)),
            tuple(data.get("sigma_x", (0.0, 0.0, 0.0))),
            int(data.get("refit_iterations", 2)),
            float(data.get("initial_jitter", 1e-6)),
        )


class CholeskySolve:
    """Cholesky factor of ``K + D`` with adaptive diagonal jitter.

    Jitter starts at 1e-10 and grows tenfold up to 1e-6; ``jitter`` records
    what was actually added (0 when the plain matrix factorized).
    """

    def __init__(self, A: np.ndarray, max_jitter: float = 1e-6):
        self.n = A.shape[0]
        self.jitter = 0.0
        jitter = 1e-10
        while True:
            try:
                M = A if self.jitter == 0 else A + self.jitter * np.eye(self.n)
                self.L = linalg.cholesky(M, lower=True, check_finite=False)
                break
            except linalg.LinAlgError:
                if jitter > max_jitter * (1 + 1e-9):
                    raise FactorizationError(
                        "K + D is not positive definite even with 1e-6 jitter; "
                        "duplicate training points need sigma_y2 > 0 or input noise"
                    ) from None
                self.jitter = jitter
                jitter *= 10.0

    def solve(self, b):
        z = linalg.solve_triangular(self.L, b, lower=True, check_finite=False)
        return linalg.solve_triangular(self.L, z, lower=True, trans="T", check_finite=False)

    def quad(self, Kxq):
        """``diag(Kxq^T A^-1 Kxq)`` for an ``n x q`` block."""
        v = linalg.solve_triangular(self.L, Kxq, lower=True, check_finite=False)
        return np.einsum("ij,ij->j", v, v)

    def inverse(self):
        return self.solve(np.eye(self.n))

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.L)))


class InverseSolve:
    """Explicit symmetric inverse of ``K + D``, as kept by block updates."""

    def __init__(self, J: np.ndarray):
        self.J = 0.5 * (J + J.T)
        self.n = J.shape[0]
        self.jitter = 0.0

    def solve(self, b):
        return self.J @ b

    def quad(self, Kxq):
        return np.einsum("ij,ij->j", Kxq, self.J @ Kxq)

    def inverse(self):
        return self.J.copy()


@dataclass(frozen=True)
class GpdfModel:
    X: np.ndarray
    kernel: KernelConfig
    noise: NoiseModel
    D_diag: np.ndarray
    solve_state: object
    alpha_occ: np.ndarray
    feature_table: np.ndarray | None = None
    feature_weights: np.ndarray | None = None
    label_table: np.ndarray | None = None
    label_weights: np.ndarray | None = None
    point_var: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def y_occupancy(self) -> np.ndarray:
        return np.ones(self.n)


@dataclass
class QueryResult:
    occupancy_mean: float
    occupancy_var: float
    distance: float
    gradient: np.ndarray
    hessian: np.ndarray
    normal: np.ndarray
    mean_curvature: float
    gaussian_curvature: float
    latent_uncertainty: float
    eikonal_uncertainty: float
    fused_uncertainty: float
    refine_steps_used: int


# ----------------------------------------------------------------------------
# fitting


def _base_diag(n, noise: NoiseModel, point_var):
    if point_var is not None:
        pv = np.asarray(point_var, dtype=float)
        if pv.shape != (n,):
            raise ValueError("point_var must have one entry per point")
        return pv.copy()
    return np.full(n, noise.sigma_y2)


def _leave_self_out_gradients(X, kernel, alpha):
    """Posterior mean gradient at each training point without its own term.

    The exponential kernel has a cusp at zero separation, so the self term has
    no derivative; the neighbours' contribution is what carries curvature.
    """
    n, D = X.shape
    G = np.zeros((n, D))
    step = max(1, _CHUNK_ELEMS // max(n * D, 1))
    for s in range(0, n, step):
        diff = X[s : s + step, None, :] - X[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        _, k1, _ = kernel_derivatives(d, kernel)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d > 0, k1 / d, 0.0) * alpha[None, :]
        G[s : s + step] = np.einsum("ij,ijk->ik", coef, diff)
    return G


def fit(
    X,
    kernel: KernelConfig,
    noise: NoiseModel | None = None,
    features=None,
    labels=None,
    point_var=None,
    input_var=None,
) -> GpdfModel:
    """Fit a distance field to surface points ``X`` (``n x D``).

    ``features`` is an optional ``n x F`` table (colours, embeddings) solved
    with the same factorization; ``labels`` holds +-1 class columns.
    ``point_var`` overrides ``sigma_y2`` per point and ``input_var``
    (``n x D``) overrides ``sigma_x`` per point in noisy-input mode.
    """
    noise = noise or NoiseModel()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("need at least one training point")
    if not np.all(np.isfinite(X)):
        raise ValueError("training points must be finite")
    n, D = X.shape
    K = kernel_matrix(X, X, kernel)
    base = _base_diag(n, noise, point_var)

    if noise.mode is NoiseMode.NOISY_INPUT:
        if input_var is None:
            sx = np.asarray(noise.sigma_x, dtype=float)
            if sx.size != D:
                raise ValueError(f"sigma_x has {sx.size} entries for {D}-d points")
            Sx = np.broadcast_to(sx, (n, D))
        else:
            Sx = np.asarray(input_var, dtype=float).reshape(n, D)
        Dd = base + noise.initial_jitter
        ones = np.ones(n)
        for _ in range(max(noise.refit_iterations, 1)):
            solver = CholeskySolve(K + np.diag(Dd))
            alpha = solver.solve(ones)
            G = _leave_self_out_gradients(X, kernel, alpha)
            Dd = base + np.einsum("ij,ij->i", G * Sx, G)
    else:
        Dd = base
    return _assemble(X, kernel, noise, K, Dd, features, labels, point_var)


def _assemble(X, kernel, noise, K, Dd, features, labels, point_var, solver=None):
    n = X.shape[0]
    if solver is None:
        solver = CholeskySolve(K + np.diag(Dd))
    alpha = solver.solve(np.ones(n))
    fw = lw = None
    ft = lt = None
    if features is not None:
        ft = np.asarray(features, dtype=float).reshape(n, -1)
        fw = solver.solve(ft)
    if labels is not None:
        lt = np.asarray(labels, dtype=float).reshape(n, -1)
        lw = solver.solve(lt)
    return GpdfModel(
        X=X, kernel=kernel, noise=noise, D_diag=np.asarray(Dd, dtype=float), solve_state=solver,
        alpha_occ=alpha, feature_table=ft, feature_weights=fw, label_table=lt, label_weights=lw,
        point_var=None if point_var is None else np.asarray(point_var, dtype=float),
    )


def attach_features(model: GpdfModel, features=None, labels=None) -> GpdfModel:
    """Return a copy of ``model`` carrying extra per-point columns."""
    n = model.n
    upd = {}
    if features is not None:
        ft = np.asarray(features, dtype=float).reshape(n, -1)
        upd.update(feature_table=ft, feature_weights=model.solve_state.solve(ft))
    if labels is not None:
        lt = np.asarray(labels, dtype=float).reshape(n, -1)
        upd.update(label_table=lt, label_weights=model.solve_state.solve(lt))
    return replace(model, **upd)


def default_length_scale(X) -> float:
    """Twice the median nearest-neighbour spacing of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 2:
        return 1.0
    dist, _ = cKDTree(X).query(X, k=2)
    return 2.0 * float(np.median(dist[:, 1]))


# ----------------------------------------------------------------------------
# batched evaluation


def _chunks(q, n, D):
    step = max(1, _CHUNK_ELEMS // max(n * D, 1))
    for s in range(0, q, step):
        yield slice(s, min(q, s + step))


def _offset_coincident(model, Xq):
    """Nudge queries sitting on a training point by 1e-9 l along the first axis."""
    dist, _ = cKDTree(model.X).query(Xq)
    eps = 1e-9 * model.kernel.length_scale
    hit = dist < eps
    if np.any(hit):
        Xq = Xq.copy()
        Xq[hit, 0] += eps
    return Xq


def occupancy(model: GpdfModel, Xq, return_var: bool = False):
    """Posterior occupancy mean (and variance) at query points ``q x D``."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    mean = np.empty(len(Xq))
    var = np.empty(len(Xq)) if return_var else None
    for sl in _chunks(len(Xq), model.n, 1):
        Kq = kernel_matrix(Xq[sl], model.X, model.kernel)
        mean[sl] = Kq @ model.alpha_occ
        if return_var:
            var[sl] = np.maximum(1.0 - model.solve_state.quad(Kq.T), 0.0)
    return (mean, var) if return_var else mean


def occupancy_derivatives(model: GpdfModel, Xq, order: int = 1, weights=None):
    """Mean, gradient (``q x D``) and optionally Hessian (``q x D x D``).

    ``weights`` replaces the occupancy weight vector, e.g. with a feature
    column's weights.
    """
    Xq = _offset_coincident(model, np.atleast_2d(np.asarray(Xq, dtype=float)))
    w = model.alpha_occ if weights is None else weights
    q, D = Xq.shape
    mean = np.empty(q)
    grad = np.empty((q, D))
    hess = np.empty((q, D, D)) if order >= 2 else None
    eye = np.eye(D)
    for sl in _chunks(q, model.n, D * (2 if order >= 2 else 1)):
        diff = Xq[sl, None, :] - model.X[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        k, k1, k2 = kernel_derivatives(d, model.kernel)
        mean[sl] = k @ w
        inv_d = 1.0 / d
        c1 = k1 * inv_d * w
        grad[sl] = np.einsum("ij,ijk->ik", c1, diff)
        if order >= 2:
            # k'' u u^T + (k'/d)(I - u u^T), with u = diff / d
            c2 = (k2 - k1 * inv_d) * inv_d**2 * w
            hess[sl] = np.einsum("ij,ijk,ijl->ikl", c2, diff, diff) + c1.sum(axis=1)[:, None, None] * eye
    return mean, grad, hess


def occupancy_variance_and_gradient(model: GpdfModel, Xq):
    """Posterior occupancy variance and its spatial gradient.

    ``d var / dx = -2 (dk(x, X)/dx) (K + D)^-1 k(X, x)``.
    """
    Xq = _offset_coincident(model, np.atleast_2d(np.asarray(Xq, dtype=float)))
    q, D = Xq.shape
    var = np.empty(q)
    gvar = np.empty((q, D))
    for sl in _chunks(q, model.n, D):
        diff = Xq[sl, None, :] - model.X[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        k, k1, _ = kernel_derivatives(d, model.kernel)
        S = model.solve_state.solve(k.T)  # n x q
        var[sl] = 1.0 - np.einsum("ij,ji->i", k, S)
        gvar[sl] = -2.0 * np.einsum("ij,ijk->ik", (k1 / d) * S.T, diff)
    return np.maximum(var, 0.0), gvar


def variance_gradient(model: GpdfModel, x):
    _, g = occupancy_variance_and_gradient(model, np.atleast_2d(x))
    return g[0]


# ----------------------------------------------------------------------------
# distance queries


def distance_derivatives(model, Xq, order: int = 1):
    """Unrefined distance ``r(o)``, its gradient and (order 2) Hessian.

    ``model`` may also be any object with an ``occupancy_derivatives(Xq,
    order)`` method, such as the low-rank approximate models.
    """
    if isinstance(model, GpdfModel):
        o, go, ho = occupancy_derivatives(model, Xq, order=order)
    else:
        o, go, ho = model.occupancy_derivatives(np.atleast_2d(np.asarray(Xq, dtype=float)), order=order)
    o = np.maximum(o, 1e-300)
    r, r1, r2 = revert_derivatives(o, model.kernel)
    grad = r1[:, None] * go
    hess = None
    if order >= 2:
        hess = r2[:, None, None] * np.einsum("ik,il->ikl", go, go) + r1[:, None, None] * ho
    return r, grad, hess


def distance(model, Xq, refine_iters: int = 5, return_details: bool = False):
    """Signed distance at query points with ray-march refinement.

    Each refinement step marches the query by ``-d * grad / |grad|``; the
    returned distance is the signed length travelled plus the residual at the
    final point.  Per-step eikonal deviations ``|1 - |grad d||`` are fused as
    ``(sum 1/s_i^2)^-1``.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    q = len(Xq)
    x = Xq.copy()
    total = np.zeros(q)
    inv_sum = np.zeros(q)
    steps = np.zeros(q, dtype=int)
    active = np.ones(q, dtype=bool)
    for it in range(refine_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        r, g, _ = distance_derivatives(model, x[idx], order=1)
        gn = np.linalg.norm(g, axis=1)
        total[idx] += r
        with np.errstate(divide="ignore"):
            inv_sum[idx] += 1.0 / np.abs(1.0 - gn) ** 2
        if it == refine_iters:
            break
        ok = gn > 1e-12
        move = idx[ok]
        x[move] -= (r[ok] / gn[ok])[:, None] * g[ok]
        steps[move] += 1
        active[idx[~ok]] = False
    if not return_details:
        return total
    with np.errstate(divide="ignore"):
        fused = np.sqrt(1.0 / inv_sum)
    return total, fused, steps, x


def curvatures_from(grad, hess):
    """Mean and Gaussian curvature of a level set from gradient and Hessian.

    The Gaussian curvature uses the bordered-Hessian determinant with the
    sign that makes a sphere of radius R come out at ``+1/R**2``; mean
    curvature comes out at ``-1/R`` for an outward distance field.
    """
    grad = np.atleast_2d(grad)
    hess = np.reshape(hess, (-1,) + hess.shape[-2:])
    gn = np.linalg.norm(grad, axis=1)
    if np.any(gn == 0):
        raise ValueError("curvature undefined where the gradient vanishes")
    gHg = np.einsum("ik,ikl,il->i", grad, hess, grad)
    tr = np.trace(hess, axis1=1, axis2=2)
    mean = (gHg - gn**2 * tr) / (2.0 * gn**3)
    D = grad.shape[1]
    border = np.zeros((len(grad), D + 1, D + 1))
    border[:, :D, :D] = hess
    border[:, :D, D] = grad
    border[:, D, :D] = grad
    gauss = -np.linalg.det(border) / gn**4
    return mean, gauss


def gradient(model: GpdfModel, x):
    return distance_derivatives(model, np.atleast_2d(x), order=1)[1][0]


def hessian(model: GpdfModel, x):
    return distance_derivatives(model, np.atleast_2d(x), order=2)[2][0]


def curvatures(model: GpdfModel, x):
    _, g, h = distance_derivatives(model, np.atleast_2d(x), order=2)
    m, k = curvatures_from(g, h)
    return float(m[0]), float(k[0])


def eikonal_uncertainty(model: GpdfModel, Xq):
    _, g, _ = distance_derivatives(model, Xq, order=1)
    return np.abs(1.0 - np.linalg.norm(g, axis=1))


def _gradient_prior_scale(kernel: KernelConfig) -> float:
    # |k''(0)|; exact gradient prior variance for the smooth kernels, and the
    # squared slope at zero separation for the exponential kernel
    _, _, k2 = kernel_derivatives(0.0, kernel)
    return float(abs(k2))


def latent_uncertainty(model: GpdfModel, Xq, jitter: float = 1e-8):
    """Mahalanobis gap between the expected and inferred occupancy slope.

    Compares ``|dk/dd|`` at the reverted distance with ``|grad o|`` under the
    posterior covariance of the occupancy gradient projected on the gradient
    direction.
    """
    Xq = _offset_coincident(model, np.atleast_2d(np.asarray(Xq, dtype=float)))
    q, D = Xq.shape
    prior = _gradient_prior_scale(model.kernel)
    out = np.empty(q)
    for sl in _chunks(q, model.n, D):
        diff = Xq[sl, None, :] - model.X[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        k, k1, _ = kernel_derivatives(d, model.kernel)
        o = k @ model.alpha_occ
        Gq = (k1 / d)[:, :, None] * diff  # q x n x D
        go = np.einsum("ijk,j->ik", Gq, model.alpha_occ)
        gn = np.linalg.norm(go, axis=1)
        u = go / np.maximum(gn, 1e-300)[:, None]
        proj = np.einsum("ijk,ik->ij", Gq, u)  # q x n, d/du of k(x, X)
        red = model.solve_state.quad(proj.T)
        var_slope = np.maximum(prior - red, 0.0) + jitter
        dhat = revert_derivatives(np.maximum(o, 1e-300), model.kernel)[0]
        _, kd1, _ = kernel_derivatives(np.abs(dhat), model.kernel)
        gap = np.abs(kd1) - gn
        out[sl] = np.sqrt(gap**2 / var_slope)
    return out


def query(model: GpdfModel, x, refine_iters: int = 5) -> QueryResult:
    """Full query at a single point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    o, v = occupancy(model, x, return_var=True)
    dist, fused, steps, _ = distance(model, x, refine_iters, return_details=True)
    _, g, h = distance_derivatives(model, x, order=2)
    gn = np.linalg.norm(g[0])
    if gn > 0:
        normal = g[0] / gn
        mc, gc = curvatures_from(g, h)
        mc, gc = float(mc[0]), float(gc[0])
    else:
        normal = np.zeros_like(g[0])
        mc = gc = float("nan")
    return QueryResult(
        occupancy_mean=float(o[0]),
        occupancy_var=float(v[0]),
        distance=float(dist[0]),
        gradient=g[0],
        hessian=h[0],
        normal=normal,
        mean_curvature=mc,
        gaussian_curvature=gc,
        latent_uncertainty=float(latent_uncertainty(model, x)[0]),
        eikonal_uncertainty=float(abs(1.0 - gn)),
        fused_uncertainty=float(fused[0]),
        refine_steps_used=int(steps[0]),
    )


# ----------------------------------------------------------------------------
# feature fields and classification


def infer_feature_field(model: GpdfModel, Xq):
    """Feature rows interpolated with the occupancy solve, ``q x F``."""
    if model.feature_weights is None:
        raise ValueError("model has no feature table")
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    out = np.empty((len(Xq), model.feature_weights.shape[1]))
    for sl in _chunks(len(Xq), model.n, 1):
        out[sl] = kernel_matrix(Xq[sl], model.X, model.kernel) @ model.feature_weights
    return out


def _label_mean(model, Xq):
    if model.label_weights is None:
        raise ValueError("model has no label columns")
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    return kernel_matrix(Xq, model.X, model.kernel) @ model.label_weights


def classify_binary(model: GpdfModel, Xq, column: int = 0):
    """Sigmoid of the GP mean of a +-1 label column."""
    m = _label_mean(model, Xq)[:, column]
    return 1.0 / (1.0 + np.exp(-m))


def classify_multiclass(model: GpdfModel, Xq):
    """Softmax over the per-class label columns."""
    m = _label_mean(model, Xq)
    m = m - m.max(axis=1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=1, keepdims=True)
