"""Incremental observation management for fitted distance fields.

Adding points extends ``(K + D)^-1`` with the block-inverse formula, so only
an ``m x m`` Schur complement is inverted for ``m`` new points.  A model fresh
from :func:`~gpdf.field.fit` still holds a Cholesky factor; adding to it grows
the factor by the same Schur complement instead of forming the inverse.  Deleting
points uses the inverse blocks directly:
``(K11 + D1)^-1 = J11 - J12 J22^-1 J12^T``.

Also here: inducing-point selection by maximizing a variational lower bound
on the marginal likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .downsample import voxel_downsample
from .field import CholeskySolve, FactorizationError, GpdfModel, InverseSolve, NoiseMode, fit
from .kernels import KernelConfig, kernel_matrix


class PartitionedSolve(InverseSolve):
    """Explicit inverse of ``K + D`` plus a stable identity per row.

    ``ids[i]`` names the training point at position ``i``; ids survive
    deletions so callers can track points across updates.
    """

    def __init__(self, J, ids):
        super().__init__(J)
        self.ids = np.asarray(ids, dtype=np.int64)

    def blocks(self, first):
        """``(J11, J12, J22)`` for the index split ``first`` / the rest."""
        first = np.asarray(first, dtype=int)
        rest = np.setdiff1d(np.arange(self.n), first)
        J = self.J
        return J[np.ix_(first, first)], J[np.ix_(first, rest)], J[np.ix_(rest, rest)]


def _ids(model: GpdfModel):
    ids = getattr(model.solve_state, "ids", None)
    return np.arange(model.n, dtype=np.int64) if ids is None else ids


def _extend_cholesky(st: CholeskySolve, K12, block):
    """Append rows to a Cholesky factor: ``L21 = L^-1 K12``, ``L22 = chol(S)``."""
    L21t = linalg.solve_triangular(st.L, K12, lower=True, check_finite=False)
    S = block + st.jitter * np.eye(len(block)) - L21t.T @ L21t
    try:
        L22 = linalg.cholesky(0.5 * (S + S.T), lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise FactorizationError(
            "new block is singular; duplicates of existing points need noise"
        ) from None
    n, m = st.n, len(block)
    out = CholeskySolve.__new__(CholeskySolve)
    out.n = n + m
    out.jitter = st.jitter
    L = np.zeros((n + m, n + m))
    L[:n, :n] = st.L
    L[n:, :n] = L21t.T
    L[n:, n:] = L22
    out.L = L
    return out


def _inverse(model: GpdfModel):
    return model.solve_state.inverse()


def _new_diag(model: GpdfModel, X2, point_var2):
    m = len(X2)
    if point_var2 is not None:
        pv = np.asarray(point_var2, dtype=float).reshape(m)
        if np.any(pv < 0):
            raise ValueError("point variances must be non-negative")
        return pv
    if model.point_var is not None:
        raise ValueError("model has per-point variances; pass point_var2 for the new points")
    return np.full(m, model.noise.sigma_y2)


def _extend_table(table, new, m, name):
    if table is None:
        if new is not None:
            raise ValueError(f"model has no {name}; cannot add them incrementally")
        return None
    if new is None:
        raise ValueError(f"model carries {name}; pass values for the new points")
    return np.vstack([table, np.asarray(new, dtype=float).reshape(m, -1)])


def add_points(model: GpdfModel, X2, point_var2=None, features2=None, labels2=None) -> GpdfModel:
    """Model over ``X1 u X2`` built from the current inverse.

    Predictions agree with a batch fit in scalar-noise mode.  In
    noisy-input mode the existing diagonal is kept and the new points use
    whatever ``point_var2`` supplies (``sigma_y2`` otherwise).
    """
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X2.size == 0:
        return model
    if X2.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim}-d points, got {X2.shape[1]}-d")
    if not np.all(np.isfinite(X2)):
        raise ValueError("new points must be finite")
    m = len(X2)
    D2 = _new_diag(model, X2, point_var2)
    K12 = kernel_matrix(model.X, X2, model.kernel)
    K22 = kernel_matrix(X2, X2, model.kernel)
    ids = _ids(model)
    next_id = int(ids.max()) + 1 if ids.size else 0
    new_ids = np.r_[ids, np.arange(next_id, next_id + m)]
    if isinstance(model.solve_state, CholeskySolve):
        # a fresh fit keeps its factor; growing it costs O(n^2 m)
        solver = _extend_cholesky(model.solve_state, K12, K22 + np.diag(D2))
        solver.ids = new_ids
        return _rebuild(
            model,
            np.vstack([model.X, X2]),
            np.r_[model.D_diag, D2],
            solver,
            _extend_table(model.feature_table, features2, m, "features"),
            _extend_table(model.label_table, labels2, m, "labels"),
            None if model.point_var is None else np.r_[model.point_var, D2],
        )
    J = _inverse(model)
    JK12 = J @ K12
    S = K22 + np.diag(D2) - K12.T @ JK12
    S = 0.5 * (S + S.T)
    try:
        cS = linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise FactorizationError(
            "new block is singular; duplicates of existing points need noise"
        ) from None
    Sinv = linalg.cho_solve(cS, np.eye(m), check_finite=False)
    top_right = -JK12 @ Sinv
    top_left = J + JK12 @ Sinv @ JK12.T
    Jn = np.block([[top_left, top_right], [top_right.T, Sinv]])
    solver = PartitionedSolve(Jn, new_ids)
    return _rebuild(
        model,
        np.vstack([model.X, X2]),
        np.r_[model.D_diag, D2],
        solver,
        _extend_table(model.feature_table, features2, m, "features"),
        _extend_table(model.label_table, labels2, m, "labels"),
        None if model.point_var is None else np.r_[model.point_var, D2],
    )


def remove_points(model: GpdfModel, indices) -> GpdfModel:
    """Drop training points at the given positions."""
    idx = np.unique(np.asarray(sorted(indices), dtype=int))
    if idx.size == 0:
        return model
    if idx.min() < 0 or idx.max() >= model.n:
        raise IndexError("point index out of range")
    if idx.size >= model.n:
        raise ValueError("cannot remove every training point")
    keep = np.setdiff1d(np.arange(model.n), idx)
    J = _inverse(model)
    J11 = J[np.ix_(keep, keep)]
    J12 = J[np.ix_(keep, idx)]
    J22 = J[np.ix_(idx, idx)]
    Jn = J11 - J12 @ linalg.solve(J22, J12.T, assume_a="pos", check_finite=False)
    solver = PartitionedSolve(Jn, _ids(model)[keep])
    ft = None if model.feature_table is None else model.feature_table[keep]
    lt = None if model.label_table is None else model.label_table[keep]
    pv = None if model.point_var is None else model.point_var[keep]
    return _rebuild(model, model.X[keep], model.D_diag[keep], solver, ft, lt, pv)


def _rebuild(model, X, Dd, solver, ft, lt, pv):
    ones = np.ones(len(X))
    return replace(
        model, X=X, D_diag=Dd, solve_state=solver, alpha_occ=solver.solve(ones),
        feature_table=ft, feature_weights=None if ft is None else solver.solve(ft),
        label_table=lt, label_weights=None if lt is None else solver.solve(lt),
        point_var=pv,
    )


def inverse_residual(model: GpdfModel) -> float:
    """Spectral norm of ``J (K + D) - I`` for the model's current inverse."""
    K = kernel_matrix(model.X, model.X, model.kernel) + np.diag(model.D_diag)
    R = _inverse(model) @ K - np.eye(model.n)
    return float(np.linalg.norm(R, 2))


# ----------------------------------------------------------------------------
# inducing points


def inducing_objective(X, y, Xm, kernel: KernelConfig, sigma_y2: float) -> float:
    """Collapsed variational bound ``log N(y | 0, s2 I + Q) - tr(K - Q) / (2 s2)``.

    ``Q = K_nm K_mm^-1 K_mn``.  Evaluated through the Cholesky factors of
    ``K_mm`` and ``I + A A^T`` with ``A = L_mm^-1 K_mn / s``, costing
    ``O(n m^2)``.
    """
    if not sigma_y2 > 0:
        raise ValueError("sigma_y2 must be positive")
    n = len(X)
    m = len(Xm)
    s = np.sqrt(sigma_y2)
    Kmn = kernel_matrix(Xm, X, kernel)
    Lm = CholeskySolve(kernel_matrix(Xm, Xm, kernel)).L
    A = linalg.solve_triangular(Lm, Kmn, lower=True, check_finite=False) / s
    B = np.eye(m) + A @ A.T
    LB = linalg.cholesky(B, lower=True, check_finite=False)
    c = linalg.solve_triangular(LB, A @ y, lower=True, check_finite=False) / s
    log_lik = (
        -0.5 * n * np.log(2.0 * np.pi)
        - np.sum(np.log(np.diag(LB)))
        - 0.5 * n * np.log(sigma_y2)
        - 0.5 * (y @ y) / sigma_y2
        + 0.5 * (c @ c)
    )
    trace_K = n * 1.0  # k(0) = 1 for every kernel here
    trace_Q = sigma_y2 * np.sum(A * A)
    return float(log_lik - (trace_K - trace_Q) / (2.0 * sigma_y2))


@dataclass
class InducingResult:
    points: np.ndarray
    objective_trace: list
    converged: bool


def _initial_inducing(X, m, rng):
    """Voxel means, with the voxel size bisected so roughly ``m`` cells fill."""
    span = np.ptp(X, axis=0).max()
    lo, hi = span * 1e-4, span * 2.0
    best = None
    for _ in range(40):
        size = np.sqrt(lo * hi)
        em = voxel_downsample(X, size)
        if best is None or abs(len(em.points) - m) < abs(len(best) - m):
            best = em.points
        if len(em.points) > m:
            lo = size
        elif len(em.points) < m:
            hi = size
        else:
            break
    pts = best
    if len(pts) > m:
        pts = pts[np.sort(rng.choice(len(pts), m, replace=False))]
    elif len(pts) < m:
        extra = X[rng.choice(len(X), m - len(pts), replace=False)]
        pts = np.vstack([pts, extra])
    return pts


def optimize_inducing(
    X,
    m: int,
    kernel: KernelConfig,
    sigma_y2: float,
    y=None,
    iterations: int = 50,
    step: float | None = None,
    init=None,
    fd_step: float | None = None,
    tol: float = 1e-9,
    seed: int = 0,
) -> InducingResult:
    """Move ``m`` inducing points uphill on :func:`inducing_objective`.

    Search directions come from one-sided finite differences, keeping the
    better-improving side per coordinate; each step is accepted only if the
    objective does not decrease (step halving otherwise), so the trace is
    non-decreasing.  Points are clamped to the data bounding box grown by
    ``2 l``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, D = X.shape
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}]")
    y = np.ones(n) if y is None else np.asarray(y, dtype=float)
    l = kernel.length_scale
    lo = X.min(axis=0) - 2.0 * l
    hi = X.max(axis=0) + 2.0 * l
    rng = np.random.default_rng(seed)
    Xm = _initial_inducing(X, m, rng) if init is None else np.array(init, dtype=float)
    Xm = np.clip(Xm, lo, hi)
    h = 1e-4 * l if fd_step is None else fd_step
    t = 0.1 * l if step is None else step

    def obj(P):
        try:
            return inducing_objective(X, y, P, kernel, sigma_y2)
        except linalg.LinAlgError:
            return -np.inf

    f = obj(Xm)
    trace = [f]
    converged = False
    for _ in range(iterations):
        g = np.zeros_like(Xm)
        for i in range(m):
            for k in range(D):
                P = Xm.copy()
                P[i, k] += h
                fp = obj(P)
                P[i, k] -= 2 * h
                fm = obj(P)
                # one-sided ascent slope; the exponential kernel has kinks
                # where an inducing point meets a data coordinate
                up, down = fp - f, fm - f
                if max(up, down) > 0:
                    g[i, k] = up / h if up >= down else -down / h
        gmax = np.abs(g).max()
        if not np.isfinite(gmax) or gmax == 0:
            converged = True
            break
        direction = g / gmax
        accepted = False
        for _ in range(20):
            cand = np.clip(Xm + t * direction, lo, hi)
            fc = obj(cand)
            if fc >= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = True
            break
        gain = fc - f
        Xm, f = cand, fc
        trace.append(f)
        t *= 1.5
        if gain <= tol * max(1.0, abs(f)):
            converged = True
            break
    return InducingResult(Xm, trace, converged)


def fit_inducing(X, m, kernel: KernelConfig, noise, **kwargs) -> tuple:
    """Optimize an inducing set then fit a distance field on it."""
    if noise.mode is not NoiseMode.SCALAR_OBSERVATION:
        raise ValueError("inducing-point optimization supports scalar observation noise only")
    res = optimize_inducing(X, m, kernel, noise.sigma_y2, **kwargs)
    return fit(res.points, kernel, noise), res
