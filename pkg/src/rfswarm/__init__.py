"""Swarm control over Gaussian-mixture intensities.

Closed-form distributional distances steer a swarm's intensity toward a
desired mixture with iterative LQR or receding-horizon MPC, and a
GM-PHD filter closes the loop when only noisy, cluttered detections are
available.
"""

import os

from threadpoolctl import threadpool_limits

# The solvers spend their time in many small dense factorizations, where
# BLAS thread pools cost far more than they save.  RFS_SWARM_THREADS
# caps the pool (default: single-threaded kernels).
_limit = int(os.environ.get("RFS_SWARM_THREADS", "1") or "1")
threadpool_limits(limits=max(1, _limit))

from . import divergence, dynamics, gmix, gmphd, ilqr, mpc, swarmsim  # noqa: E402
from .divergence import (  # noqa: E402
    CostQuadratization,
    DistanceKind,
    cs_divergence,
    l2_distance,
    modified_l2,
    quadratize,
)
from .gmix import (  # noqa: E402
    GaussianComponent,
    GaussianMixture,
    cross_likelihood,
    eval_density,
    inner_product,
)

__version__ = "0.1.0"

__all__ = [
    "CostQuadratization",
    "DistanceKind",
    "GaussianComponent",
    "GaussianMixture",
    "cross_likelihood",
    "cs_divergence",
    "divergence",
    "dynamics",
    "eval_density",
    "gmix",
    "gmphd",
    "ilqr",
    "inner_product",
    "l2_distance",
    "modified_l2",
    "mpc",
    "quadratize",
    "swarmsim",
]
