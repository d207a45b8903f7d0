"""Gaussian-process distance fields for surface reconstruction and active perception."""
from .approx import (
    ApproxModel,
    LowRankFactors,
    OutOfDomainError,
    approx_add_points,
    approx_fit,
    approx_query,
    approx_remove_points,
    hilbert_factors,
    nystrom_factors,
    ski_factors,
)
from .downsample import EmitMode, VoxelGrid, accumulate, emit_samples, merge, voxel_downsample
from .explore import (
    Ensemble,
    TouchTarget,
    information_gain,
    make_ensemble,
    most_uncertain_surface_point,
    next_best_view,
)
from .field import (
    GpdfModel,
    NoiseMode,
    NoiseModel,
    QueryResult,
    curvatures,
    distance,
    fit,
    gradient,
    hessian,
    occupancy,
    query,
)
from .kernels import KernelConfig, KernelKind
from .render import CameraModel, optimize_by_rendering, render_volumetric, sphere_trace
from .updates import add_points, optimize_inducing, remove_points

__version__ = "0.1.0"
