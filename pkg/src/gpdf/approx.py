"""Low-rank kernel approximations with a shared Woodbury inference path.

All three methods write ``K(X1, X2) ~ A_X1 B A_X2^T`` with an ``m``-column
feature map ``A``:

* SKI: multilinear interpolation weights onto a lattice, ``B = K(U, U)``.
* Hilbert space: Laplacian eigenfunctions on a box, ``B`` the spectral
  density at the eigen-frequencies.
* Nystrom: ``A = k(x, X_ref) Phi``, ``B = diag(1 / lambda)`` from the top
  eigenpairs of ``K(X_ref, X_ref)``.

Inference only ever factorizes the ``m x m`` matrix ``B^-1 + A^T D^-1 A``, so
training and prediction are linear in the number of observations.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

from .kernels import KernelConfig, kernel_derivatives, kernel_matrix, spectral_density

MIN_NOISE = 1e-8


class OutOfDomainError(ValueError):
    """Query or training point outside the approximation's support box."""


@dataclass
class LowRankFactors:
    method: str
    m: int
    B: np.ndarray
    B_inv: np.ndarray
    kernel: KernelConfig
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    refs: np.ndarray | None = None
    # method-specific state
    shape: tuple | None = None
    modes: np.ndarray | None = None
    half_width: np.ndarray | None = None
    center: np.ndarray | None = None
    Phi: np.ndarray | None = None
    extra: dict = field(default_factory=dict)
    # "raise" rejects points outside the box; "extrapolate" evaluates anyway
    # (zero rows for SKI, the periodic sine continuation for Hilbert)
    outside: str = "raise"

    @property
    def dim(self) -> int:
        if self.refs is not None:
            return self.refs.shape[1]
        return len(self.box_lo)

    def features(self, X):
        """Feature rows ``A_X`` (sparse CSR for SKI, dense otherwise)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.method == "ski":
            return _ski_rows(self, X)[0]
        if self.method == "hilbert":
            return _hilbert_rows(self, X)[0]
        return kernel_matrix(X, self.refs, self.kernel) @ self.Phi

    def raw_features(self, X, grad: bool = False):
        """Rows before any fixed linear map: ``k(x, X_ref)`` for Nystrom.

        With ``grad`` returns ``(F, dF)``, ``dF`` shaped ``q x m x D``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.method != "nystrom":
            if not grad:
                return self.features(X)
            return self.features_with_gradient(X)
        if not grad:
            return kernel_matrix(X, self.refs, self.kernel)
        diff = X[:, None, :] - self.refs[None, :, :]
        d = np.linalg.norm(diff, axis=2)
        k, k1, _ = kernel_derivatives(d, self.kernel)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(d > 0, k1 / d, 0.0)
        return k, c[:, :, None] * diff

    def features_with_gradient(self, X):
        """``(A_X, dA_X/dx)`` with the gradient shaped ``q x m x D``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.method == "ski":
            A, dA = _ski_rows(self, X, grad=True)
            return A.toarray(), dA
        if self.method == "hilbert":
            return _hilbert_rows(self, X, grad=True)
        k, dK = self.raw_features(X, grad=True)
        return k @ self.Phi, np.einsum("ijk,jm->imk", dK, self.Phi)

    def approx_kernel(self, X1, X2=None):
        A1 = _dense(self.features(X1))
        A2 = A1 if X2 is None else _dense(self.features(X2))
        K = A1 @ self.B @ A2.T
        return 0.5 * (K + K.T) if X2 is None else K


def _dense(A):
    return A.toarray() if sparse.issparse(A) else A


def _outside_mask(f: LowRankFactors, X):
    lo, hi = f.box_lo, f.box_hi
    tol = 1e-12 * np.maximum(1.0, np.abs(hi - lo))
    bad = np.any((X < lo - tol) | (X > hi + tol), axis=1)
    if np.any(bad) and f.outside == "raise":
        raise OutOfDomainError(
            f"{int(bad.sum())} point(s) outside the {f.method} domain [{lo}, {hi}]"
        )
    return bad


# ----------------------------------------------------------------------------
# SKI


def ski_factors(lo, hi, nodes_per_axis, cfg: KernelConfig) -> LowRankFactors:
    """Lattice factors on the box ``[lo, hi]`` with ``nodes_per_axis`` nodes."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    D = lo.size
    shape = tuple(np.broadcast_to(np.asarray(nodes_per_axis, dtype=int), (D,)))
    if any(s < 2 for s in shape):
        raise ValueError("need at least two nodes per axis")
    axes = [np.linspace(lo[i], hi[i], shape[i]) for i in range(D)]
    U = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, D)
    B = kernel_matrix(U, U, cfg)
    B = 0.5 * (B + B.T)
    B_inv = _spd_inverse(B)
    return LowRankFactors(
        "ski", U.shape[0], B, B_inv, cfg, box_lo=lo, box_hi=hi, refs=U, shape=shape,
        extra={"step": (hi - lo) / (np.asarray(shape) - 1)},
    )


def _spd_inverse(B):
    jitter = 0.0
    n = B.shape[0]
    for _ in range(8):
        try:
            c = linalg.cho_factor(B + jitter * np.eye(n), lower=True, check_finite=False)
            Bi = linalg.cho_solve(c, np.eye(n), check_finite=False)
            return 0.5 * (Bi + Bi.T)
        except linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0 else jitter * 10
    raise np.linalg.LinAlgError("lattice kernel matrix is not positive definite")


def _ski_rows(f: LowRankFactors, X, grad: bool = False):
    bad = _outside_mask(f, X)
    q, D = X.shape
    shape = np.asarray(f.shape)
    h = f.extra["step"]
    pos = (X - f.box_lo) / h
    cell = np.clip(np.floor(pos).astype(int), 0, shape - 2)
    t = pos - cell
    strides = np.array([int(np.prod(shape[i + 1 :])) for i in range(D)])
    corners = list(itertools.product((0, 1), repeat=D))
    cols = np.empty((q, len(corners)), dtype=int)
    vals = np.empty((q, len(corners)))
    dvals = np.empty((q, len(corners), D)) if grad else None
    for c, bits in enumerate(corners):
        bits = np.asarray(bits)
        cols[:, c] = (cell + bits) @ strides
        factors = np.where(bits == 1, t, 1.0 - t)
        vals[:, c] = np.where(bad, 0.0, np.prod(factors, axis=1))
        if grad:
            for k in range(D):
                others = np.prod(np.delete(factors, k, axis=1), axis=1)
                dvals[:, c, k] = np.where(bad, 0.0, (1.0 if bits[k] else -1.0) / h[k] * others)
    rows = np.repeat(np.arange(q), len(corners))
    A = sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(q, f.m))
    if not grad:
        return A, None
    dA = np.zeros((q, f.m, D))
    np.add.at(dA, (rows, cols.ravel()), dvals.reshape(-1, D))
    return A, dA


# ----------------------------------------------------------------------------
# Hilbert space


def hilbert_factors(center, half_width, modes_per_axis, cfg: KernelConfig, max_modes=None) -> LowRankFactors:
    """Reduced-rank factors on the box ``center +- half_width``.

    The tensor product of 1-D sine eigenfunctions is ordered by eigenvalue
    and truncated to ``max_modes`` (default: keep all).
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    L = np.broadcast_to(np.atleast_1d(np.asarray(half_width, dtype=float)), center.shape).copy()
    D = center.size
    per_axis = np.broadcast_to(np.asarray(modes_per_axis, dtype=int), (D,))
    grids = np.meshgrid(*[np.arange(1, p + 1) for p in per_axis], indexing="ij")
    modes = np.stack([g.ravel() for g in grids], axis=1)
    lam = np.sum((modes * np.pi / (2.0 * L)) ** 2, axis=1)
    order = np.argsort(lam, kind="stable")
    if max_modes is not None:
        order = order[:max_modes]
    modes, lam = modes[order], lam[order]
    # the table density is in cycles per length; eigenfrequencies are angular
    S = spectral_density(np.sqrt(lam) / (2.0 * np.pi), cfg, D)
    return LowRankFactors(
        "hilbert", len(lam), np.diag(S), np.diag(1.0 / S), cfg,
        box_lo=center - L, box_hi=center + L, modes=modes, half_width=L, center=center,
        extra={"S": S},
    )


def _hilbert_rows(f: LowRankFactors, X, grad: bool = False):
    _outside_mask(f, X)
    L = f.half_width
    shifted = X - f.center + L  # q x D
    freq = f.modes * np.pi / (2.0 * L)  # m x D
    arg = shifted[:, None, :] * freq[None, :, :]  # q x m x D
    amp = np.sqrt(1.0 / L)
    s = amp * np.sin(arg)
    A = np.prod(s, axis=2)
    if not grad:
        return A, None
    c = amp * freq[None, :, :] * np.cos(arg)
    D = X.shape[1]
    dA = np.empty(s.shape)
    for k in range(D):
        dA[:, :, k] = c[:, :, k] * np.prod(np.delete(s, k, axis=2), axis=2)
    return A, dA


# ----------------------------------------------------------------------------
# Nystrom


def nystrom_factors(refs, rank, cfg: KernelConfig, rel_tol: float = 1e-12) -> LowRankFactors:
    """Factors from the top ``rank`` eigenpairs of ``K(refs, refs)``."""
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    m_hat = refs.shape[0]
    if not 1 <= rank <= m_hat:
        raise ValueError(f"rank must be in [1, {m_hat}], got {rank}")
    K = kernel_matrix(refs, refs, cfg)
    lam, vec = linalg.eigh(0.5 * (K + K.T), check_finite=False)
    lam, vec = lam[::-1][:rank], vec[:, ::-1][:, :rank]
    if lam[-1] <= rel_tol * lam[0]:
        raise np.linalg.LinAlgError(
            f"reference kernel matrix has numerical rank below the requested {rank}"
        )
    return LowRankFactors("nystrom", rank, np.diag(1.0 / lam), np.diag(lam), cfg, refs=refs, Phi=vec)


# ----------------------------------------------------------------------------
# Woodbury inference


@dataclass
class ApproxModel:
    factors: LowRankFactors
    X: np.ndarray
    y: np.ndarray
    noise_diag: np.ndarray
    AtDA: np.ndarray
    AtDy: np.ndarray
    chol: tuple
    beta: np.ndarray

    @property
    def kernel(self) -> KernelConfig:
        return self.factors.kernel

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @cached_property
    def _query_weights(self):
        # Nystrom rows are k(x, X_ref) Phi; folding Phi into the weights keeps
        # queries at one kernel row plus an O(m) dot product
        if self.factors.method == "nystrom":
            return self.factors.Phi @ self.beta
        return self.beta

    @cached_property
    def _query_cov(self):
        m = self.factors.m
        C = linalg.cho_solve(self.chol, np.eye(m), check_finite=False)
        if self.factors.method == "nystrom":
            Phi = self.factors.Phi
            C = Phi @ C @ Phi.T
        return 0.5 * (C + C.T)

    def mean_var(self, Xq, return_var: bool = True):
        F = self.factors.raw_features(Xq)
        mean = np.asarray(F @ self._query_weights).ravel()
        if not return_var:
            return mean
        V = F @ self._query_cov
        if sparse.issparse(F):
            var = np.asarray(F.multiply(V).sum(axis=1)).ravel()
        else:
            var = np.einsum("ij,ij->i", F, V)
        return mean, np.maximum(var, 0.0)

    def occupancy_derivatives(self, Xq, order: int = 1):
        if order > 1:
            raise NotImplementedError("approximate models provide first derivatives only")
        F, dF = self.factors.raw_features(Xq, grad=True)
        w = self._query_weights
        return np.asarray(F @ w).ravel(), np.einsum("imk,m->ik", dF, w), None

    def apply_inverse(self, v):
        """``(A B A^T + D)^-1 v`` via the Woodbury identity."""
        A = _dense(self.factors.features(self.X))
        Dinv = 1.0 / self.noise_diag
        v = np.asarray(v, dtype=float)
        w = Dinv if v.ndim == 1 else Dinv[:, None]
        u = w * v
        return u - w * (A @ linalg.cho_solve(self.chol, A.T @ u, check_finite=False))


def _factor_inner(B_inv, AtDA):
    P = B_inv + AtDA
    P = 0.5 * (P + P.T)
    m = P.shape[0]
    jitter = 0.0
    scale = max(float(np.mean(np.diag(P))), 1e-300)
    for _ in range(10):
        try:
            return linalg.cho_factor(P + jitter * np.eye(m), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter = 1e-12 * scale if jitter == 0 else jitter * 10
    raise np.linalg.LinAlgError("B^-1 + A^T D^-1 A is singular")


def _gram(A, w):
    if sparse.issparse(A):
        AtW = A.T.multiply(w[None, :]).tocsr()
        G = AtW @ A
        return G.toarray() if sparse.issparse(G) else np.asarray(G)
    return (A.T * w) @ A


def _atv(A, v):
    return np.asarray(A.T @ v).ravel()


def approx_fit(X, factors: LowRankFactors, sigma_y2: float, y=None) -> ApproxModel:
    """Fit the approximate GP (occupancy labels default to ones)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    y = np.ones(n) if y is None else np.asarray(y, dtype=float)
    noise = np.broadcast_to(np.maximum(np.asarray(sigma_y2, dtype=float), MIN_NOISE), (n,)).copy()
    A = factors.features(X)
    Dinv = 1.0 / noise
    AtDA = _gram(A, Dinv)
    AtDy = _atv(A, Dinv * y)
    return _finish(factors, X, y, noise, AtDA, AtDy)


def _finish(factors, X, y, noise, AtDA, AtDy):
    chol = _factor_inner(factors.B_inv, AtDA)
    beta = linalg.cho_solve(chol, AtDy, check_finite=False)
    return ApproxModel(factors, X, y, noise, AtDA, AtDy, chol, beta)


def approx_query(model: ApproxModel, Xq):
    """Approximate posterior mean and variance at ``Xq``."""
    return model.mean_var(np.atleast_2d(np.asarray(Xq, dtype=float)))


def approx_add_points(model: ApproxModel, X2, sigma_y2=None, y2=None) -> ApproxModel:
    """Accumulate new observations; only the ``m x m`` system is refactored."""
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X2.shape[0] == 0:
        return model
    n2 = X2.shape[0]
    s2 = model.noise_diag[0] if sigma_y2 is None else sigma_y2
    noise2 = np.broadcast_to(np.maximum(np.asarray(s2, dtype=float), MIN_NOISE), (n2,)).copy()
    y2 = np.ones(n2) if y2 is None else np.asarray(y2, dtype=float)
    A2 = model.factors.features(X2)
    AtDA = model.AtDA + _gram(A2, 1.0 / noise2)
    AtDy = model.AtDy + _atv(A2, y2 / noise2)
    return _finish(
        model.factors, np.vstack([model.X, X2]), np.r_[model.y, y2], np.r_[model.noise_diag, noise2], AtDA, AtDy
    )


def approx_remove_points(model: ApproxModel, indices) -> ApproxModel:
    """Subtract the contribution of the observations at ``indices``."""
    idx = np.unique(np.asarray(list(indices), dtype=int))
    if idx.size == 0:
        return model
    if idx.size >= model.n:
        raise ValueError("cannot remove every observation")
    A2 = model.factors.features(model.X[idx])
    w = 1.0 / model.noise_diag[idx]
    AtDA = model.AtDA - _gram(A2, w)
    AtDy = model.AtDy - _atv(A2, w * model.y[idx])
    keep = np.setdiff1d(np.arange(model.n), idx)
    return _finish(model.factors, model.X[keep], model.y[keep], model.noise_diag[keep], AtDA, AtDy)


# ----------------------------------------------------------------------------
# benchmark protocol


def circle_points(n, radius=1.0, rng=None):
    """``n`` points at uniform random angles on a circle about the origin."""
    rng = np.random.default_rng(0) if rng is None else rng
    th = rng.uniform(0.0, 2 * np.pi, n)
    return radius * np.c_[np.cos(th), np.sin(th)]


def make_factors(method, cfg: KernelConfig, half_width=5.0, nodes=41, refs=None, rank=None,
                 outside="raise") -> LowRankFactors:
    """Factors for one method on the square ``[-half_width, half_width]^2``."""
    if method == "ski":
        f = ski_factors([-half_width] * 2, [half_width] * 2, nodes, cfg)
    elif method == "hilbert":
        f = hilbert_factors([0.0, 0.0], half_width, nodes, cfg)
    elif method == "nystrom":
        if refs is None:
            raise ValueError("Nystrom factors need reference points")
        f = nystrom_factors(refs, len(refs) if rank is None else rank, cfg)
    else:
        raise ValueError(f"unknown approximation method {method!r}")
    f.outside = outside
    return f


def _best_time(fn, repeats):
    import time

    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _rms_distance(model, Q, truth, refine_iters):
    from .field import distance

    # extrapolated lattice fields can underflow to zero occupancy
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        try:
            d = distance(model, Q, refine_iters=refine_iters)
        except OutOfDomainError:
            return None
        err = np.sqrt(np.mean((d - truth) ** 2))
    return float(err) if np.isfinite(err) else None


def benchmark(
    methods=("ski", "hilbert", "nystrom"),
    n_sweep=(1000, 2000, 4000),
    length_scale=0.2,
    sigma_y2=1e-4,
    half_width=5.0,
    nodes=41,
    radius=1.0,
    n_refs=200,
    nystrom_refs="grid",
    outside_radius=None,
    downsample=None,
    n_queries=200,
    repeats=3,
    refine_iters=5,
    seed=0,
):
    """Timing and accuracy of each approximation on points from a circle.

    Training and query times are best-of-``repeats`` wall clock.  Accuracy is
    the RMS distance error on a circle of radius ``(radius + half_width) / 2``
    inside the box and on one of radius ``outside_radius`` (default: just
    outside the box corners).  Nystrom references are the lattice nodes
    (``nystrom_refs="grid"``, so every method has the same ``m``) or
    ``n_refs`` training points drawn at random (``"data"``).  Queries outside the box are evaluated with the
    lattice methods extrapolating; an error of ``None`` means the estimate
    was not finite.  Returns one record per (method, n).
    """
    from .downsample import voxel_downsample

    rng = np.random.default_rng(seed)
    cfg = KernelConfig("matern_half", length_scale)
    if outside_radius is None:
        outside_radius = 1.1 * np.sqrt(2.0) * half_width
    r_in = 0.5 * (radius + half_width)
    ang = np.linspace(0.0, 2 * np.pi, n_queries, endpoint=False) + 0.01
    ring = np.c_[np.cos(ang), np.sin(ang)]
    q_in, q_out = r_in * ring, outside_radius * ring
    if nystrom_refs not in ("grid", "data"):
        raise ValueError("nystrom_refs must be 'grid' or 'data'")
    lattice = {m: make_factors(m, cfg, half_width, nodes, outside="extrapolate")
               for m in methods if m != "nystrom"}
    grid_nystrom = None
    if "nystrom" in methods and nystrom_refs == "grid":
        ax = np.linspace(-half_width, half_width, nodes)
        refs = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
        grid_nystrom = make_factors("nystrom", cfg, refs=refs)
    report = []
    for n in n_sweep:
        X = circle_points(n, radius, rng)
        n_raw = n
        if downsample:
            X = voxel_downsample(X, downsample).points
        for method in methods:
            if method == "nystrom" and nystrom_refs == "grid":
                factors = grid_nystrom
            elif method == "nystrom":
                idx = np.sort(rng.choice(len(X), min(n_refs, len(X)), replace=False))
                factors = make_factors("nystrom", cfg, refs=X[idx])
            else:
                factors = lattice[method]
            fit_s, model = _best_time(lambda: approx_fit(X, factors, sigma_y2), repeats)
            q1 = q_in[:1]
            single_s, _ = _best_time(lambda: approx_query(model, q1), max(repeats, 10))
            batch_s, _ = _best_time(lambda: approx_query(model, q_in), repeats)
            report.append({
                "method": method,
                "n": int(n_raw),
                "n_train": int(len(X)),
                "m": int(factors.m),
                "fit_ms": 1e3 * fit_s,
                "query_ms_single": 1e3 * single_s,
                "query_ms_batch": 1e3 * batch_s,
                "batch_size": int(len(q_in)),
                "rms_distance_error_inside": _rms_distance(model, q_in, r_in - radius, refine_iters),
                "rms_distance_error_outside": _rms_distance(model, q_out, outside_radius - radius, refine_iters),
            })
    return report
