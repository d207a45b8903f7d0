"""Voxel statistics for point-cloud reduction.

Each occupied voxel keeps the weight sum, weighted point sum and weighted
outer-product sum, which is enough to recover the cell mean and covariance
and to merge grids built from separate shards.  Sums are taken relative to
the cell's lower corner to avoid cancellation far from the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class EmitMode(str, Enum):
    MEAN_ONLY = "mean_only"
    EIGEN_AUGMENTED = "eigen_augmented"


@dataclass
class CellStats:
    weight: float
    sum_x: np.ndarray
    sum_xx: np.ndarray


@dataclass
class VoxelGrid:
    """Sparse voxel grid keyed by integer cell index tuples.

    ``origin`` is fixed by the first :func:`accumulate` call when not given
    (the minimum corner of that batch).
    """

    voxel_size: float
    origin: np.ndarray | None = None
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.voxel_size) or self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.origin is not None:
            self.origin = np.asarray(self.origin, dtype=float)

    def __len__(self):
        return len(self.cells)

    @property
    def dim(self):
        return None if self.origin is None else self.origin.size

    def corner(self, key):
        return self.origin + self.voxel_size * np.asarray(key, dtype=float)

    def mean_cov(self, key):
        """Cell mean and (population) covariance."""
        c = self.cells[key]
        rel_mean = c.sum_x / c.weight
        cov = c.sum_xx / c.weight - np.outer(rel_mean, rel_mean)
        return self.corner(key) + rel_mean, 0.5 * (cov + cov.T)


def accumulate(grid: VoxelGrid, points, weights=None) -> VoxelGrid:
    """Add points (optionally weighted) to ``grid`` in place and return it."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[0] == 0:
        return grid
    if not np.all(np.isfinite(P)):
        raise ValueError("points must be finite")
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != (len(P),):
        raise ValueError("need one weight per point")
    if np.any(~(w > 0)):
        raise ValueError("weights must be positive")
    if grid.origin is None:
        grid.origin = P.min(axis=0)
    elif grid.origin.size != P.shape[1]:
        raise ValueError("point dimension does not match the grid")
    idx = np.floor((P - grid.origin) / grid.voxel_size).astype(np.int64)
    keys, inv = np.unique(idx, axis=0, return_inverse=True)
    inv = inv.ravel()
    rel = P - (grid.origin + grid.voxel_size * idx)
    D = P.shape[1]
    W = np.bincount(inv, weights=w, minlength=len(keys))
    S = np.zeros((len(keys), D))
    np.add.at(S, inv, w[:, None] * rel)
    SS = np.zeros((len(keys), D, D))
    np.add.at(SS, inv, w[:, None, None] * rel[:, :, None] * rel[:, None, :])
    for j, key in enumerate(map(tuple, keys)):
        cell = grid.cells.get(key)
        if cell is None:
            grid.cells[key] = CellStats(float(W[j]), S[j].copy(), SS[j].copy())
        else:
            cell.weight += W[j]
            cell.sum_x += S[j]
            cell.sum_xx += SS[j]
    return grid


def merge(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    """Cellwise sum of two grids with the same size and origin."""
    if a.voxel_size != b.voxel_size or not np.array_equal(a.origin, b.origin):
        raise ValueError("grids must share voxel size and origin")
    out = VoxelGrid(a.voxel_size, a.origin.copy())
    for src in (a, b):
        for key, c in src.cells.items():
            cur = out.cells.get(key)
            if cur is None:
                out.cells[key] = CellStats(c.weight, c.sum_x.copy(), c.sum_xx.copy())
            else:
                cur.weight += c.weight
                cur.sum_x += c.sum_x
                cur.sum_xx += c.sum_xx
    return out


@dataclass
class Emission:
    points: np.ndarray
    uncertainty: np.ndarray
    cell: np.ndarray  # index into the sorted cell list, one per emitted point
    normals: np.ndarray  # minimal-eigenvalue eigenvector of the source cell


def emit_samples(grid: VoxelGrid, mode=EmitMode.MEAN_ONLY, rank_tol: float = 1e-12) -> Emission:
    """Turn cell statistics into a reduced point cloud.

    ``mean_only`` emits each cell mean with the smallest covariance
    eigenvalue as its uncertainty.  ``eigen_augmented`` adds the mean
    +- sqrt(lambda) v along every non-minimal eigenvector (five points per
    cell in 3-D).  Cells whose covariance lacks ``D - 1`` non-trivial
    directions emit the mean only.
    """
    mode = EmitMode(mode)
    if len(grid) == 0:
        raise ValueError("grid is empty")
    pts, unc, cid, nrm = [], [], [], []
    tol = rank_tol * grid.voxel_size**2
    for j, key in enumerate(sorted(grid.cells)):
        mu, cov = grid.mean_cov(key)
        lam, vec = np.linalg.eigh(cov)
        lam = np.maximum(lam, 0.0)
        n_hat = vec[:, 0]
        group = [mu]
        if mode is EmitMode.EIGEN_AUGMENTED and np.all(lam[1:] > tol):
            for i in range(1, len(lam)):
                off = np.sqrt(lam[i]) * vec[:, i]
                group += [mu + off, mu - off]
        pts.extend(group)
        unc.extend([lam[0]] * len(group))
        cid.extend([j] * len(group))
        nrm.extend([n_hat] * len(group))
    return Emission(np.array(pts), np.array(unc), np.array(cid), np.array(nrm))


def voxel_downsample(points, voxel_size, mode=EmitMode.MEAN_ONLY, weights=None) -> Emission:
    """One-shot grid build plus emission, origin at the cloud's minimum corner."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    grid = accumulate(VoxelGrid(voxel_size, P.min(axis=0)), P, weights)
    return emit_samples(grid, mode)
