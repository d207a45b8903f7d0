"""Isotropic covariance kernels and their reverting functions.

Every kernel here is a function of the Euclidean distance ``d`` between two
points with ``k(0) = 1``.  A *reverting function* ``r`` inverts the distance
dependence, ``r(k(d)) = d``, which is what turns a GP occupancy posterior into
a distance estimate.  Only the exponential (Matern 1/2) kernel extends to
negative distances, giving a signed field.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import optimize, special
from scipy.spatial.distance import cdist

_OCC_FLOOR = 1e-300


class KernelKind(str, Enum):
    RATIONAL_QUADRATIC = "rational_quadratic"
    SQUARED_EXPONENTIAL = "squared_exponential"
    MATERN_HALF = "matern_half"
    MATERN_THREE_HALF = "matern_three_half"


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family plus its length scale ``l`` (and ``alpha`` for RQ)."""

    kind: KernelKind = KernelKind.MATERN_HALF
    length_scale: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if not np.isfinite(self.length_scale) or self.length_scale <= 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if self.kind is KernelKind.RATIONAL_QUADRATIC and not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def signed(self) -> bool:
        return self.kind is KernelKind.MATERN_HALF

    def with_length_scale(self, length_scale: float) -> "KernelConfig":
        return KernelConfig(self.kind, float(length_scale), self.alpha)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "length_scale": self.length_scale, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelConfig":
        return cls(KernelKind(data["kind"]), float(data["length_scale"]), float(data.get("alpha", 1.0)))


def eval_kernel(d, cfg: KernelConfig):
    """Kernel value ``k(d)``.

    The exponential kernel is evaluated for negative ``d`` too (its analytic
    continuation), which the signed reverting function relies on.
    """
    d = np.asarray(d, dtype=float)
    l = cfg.length_scale
    kind = cfg.kind
    if kind is KernelKind.MATERN_HALF:
        return np.exp(-d / l)
    if kind is KernelKind.SQUARED_EXPONENTIAL:
        return np.exp(-0.5 * (d / l) ** 2)
    if kind is KernelKind.RATIONAL_QUADRATIC:
        return (1.0 + d**2 / (2.0 * cfg.alpha * l**2)) ** (-cfg.alpha)
    a = np.sqrt(3.0) / l
    return (1.0 + a * d) * np.exp(-a * d)


def kernel_derivatives(d, cfg: KernelConfig):
    """Return ``(k, dk/dd, d2k/dd2)`` at distance ``d``."""
    d = np.asarray(d, dtype=float)
    l = cfg.length_scale
    kind = cfg.kind
    if kind is KernelKind.MATERN_HALF:
        k = np.exp(-d / l)
        return k, -k / l, k / l**2
    if kind is KernelKind.SQUARED_EXPONENTIAL:
        k = np.exp(-0.5 * (d / l) ** 2)
        return k, -d / l**2 * k, (d**2 / l**4 - 1.0 / l**2) * k
    if kind is KernelKind.RATIONAL_QUADRATIC:
        al = cfg.alpha
        base = 1.0 + d**2 / (2.0 * al * l**2)
        k = base ** (-al)
        k1 = -(d / l**2) * base ** (-al - 1.0)
        k2 = -(1.0 / l**2) * base ** (-al - 1.0) + (d**2 / l**4) * ((al + 1.0) / al) * base ** (-al - 2.0)
        return k, k1, k2
    a = np.sqrt(3.0) / l
    e = np.exp(-a * d)
    return (1.0 + a * d) * e, -(a**2) * d * e, -(a**2) * e * (1.0 - a * d)


def _matern32_revert_scalar(o: float, l: float) -> float:
    if o >= 1.0:
        return 0.0
    hi = 50.0 * l
    a = np.sqrt(3.0) / l
    k_hi = (1.0 + a * hi) * np.exp(-a * hi)
    if o <= k_hi:
        return hi
    f = lambda d: (1.0 + a * d) * np.exp(-a * d) - o
    return optimize.brentq(f, 0.0, hi, xtol=1e-12, rtol=1e-14, maxiter=200)


def revert(o, cfg: KernelConfig):
    """Reverting function: the distance whose kernel value is ``o``.

    Non-positive occupancy is a domain error.  Occupancies that underflow are
    floored at 1e-300, so very far queries come back as a large finite
    distance rather than ``inf``.
    """
    o = np.asarray(o, dtype=float)
    if np.any(o <= 0):
        raise ValueError("occupancy must be positive for the reverting function")
    o = np.maximum(o, _OCC_FLOOR)
    l = cfg.length_scale
    kind = cfg.kind
    if kind is KernelKind.MATERN_HALF:
        return -l * np.log(o)
    if kind is KernelKind.SQUARED_EXPONENTIAL:
        return np.sqrt(np.maximum(-2.0 * l**2 * np.log(o), 0.0))
    if kind is KernelKind.RATIONAL_QUADRATIC:
        return np.sqrt(np.maximum(2.0 * cfg.alpha * l**2 * (o ** (-1.0 / cfg.alpha) - 1.0), 0.0))
    out = np.vectorize(lambda v: _matern32_revert_scalar(float(v), l), otypes=[float])(o)
    return out if out.ndim else float(out)


def revert_derivatives(o, cfg: KernelConfig):
    """Return ``(r, dr/do, d2r/do2)`` via the inverse-function rule.

    For the exponential kernel these reduce to ``-l log o``, ``-l/o`` and
    ``l/o**2``.  The other kernels return zero derivatives where ``o >= 1``.
    """
    o = np.maximum(np.asarray(o, dtype=float), _OCC_FLOOR)
    if cfg.kind is KernelKind.MATERN_HALF:
        l = cfg.length_scale
        with np.errstate(over="ignore"):
            return -l * np.log(o), -l / o, l / o**2
    r = revert(o, cfg)
    _, k1, k2 = kernel_derivatives(r, cfg)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = 1.0 / k1
        r2 = -k2 / k1**3
    # smooth kernels clamp o >= 1 to r = 0, where the clamped map is flat
    flat = r <= 0
    r1 = np.where(flat, 0.0, r1)
    r2 = np.where(flat, 0.0, r2)
    return r, r1, r2


def spectral_density(s, cfg: KernelConfig, dim: int):
    """Spectral density ``S(s)`` in ordinary frequency (cycles per length unit).

    Squared exponential: ``(2 pi l^2)^(D/2) exp(-2 pi^2 l^2 s^2)``; the two
    Matern kernels share the general Matern row with ``nu`` 1/2 or 3/2.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("frequency must be non-negative")
    l = cfg.length_scale
    D = dim
    kind = cfg.kind
    if kind is KernelKind.SQUARED_EXPONENTIAL:
        return (2.0 * np.pi * l**2) ** (D / 2.0) * np.exp(-2.0 * np.pi**2 * l**2 * s**2)
    if kind in (KernelKind.MATERN_HALF, KernelKind.MATERN_THREE_HALF):
        nu = 0.5 if kind is KernelKind.MATERN_HALF else 1.5
        const = (
            2.0**D * np.pi ** (D / 2.0) * special.gamma(nu + D / 2.0) * (2.0 * nu) ** nu
            / (special.gamma(nu) * l ** (2.0 * nu))
        )
        return const * (2.0 * nu / l**2 + 4.0 * np.pi**2 * s**2) ** (-(nu + D / 2.0))
    # rational quadratic row, with the s -> 0 limit of s^v K_v(s) = 2^(v-1) Gamma(v)
    al = cfg.alpha
    v = al - D / 2.0
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        body = s**v * special.kv(v, s)
    if v > 0:
        body = np.where(s == 0, 2.0 ** (v - 1.0) * special.gamma(v), body)
    body = np.where(np.isinf(s), 0.0, body)
    return l * body / (2.0 ** (al - 1.0) * special.gamma(al))


def kernel_matrix(X1, X2, cfg: KernelConfig):
    """Dense kernel matrix ``K[i, j] = k(|X1[i] - X2[j]|)``."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    return eval_kernel(cdist(X1, X2), cfg)
