"""Gaussian mixture intensities and Gaussian cross-likelihood primitives.

A swarm intensity is represented as a weighted sum of multivariate normal
densities.  Weights are expected counts rather than probabilities:
integrating the intensity over the whole state space yields the expected
number of agents, so the weights of a mixture sum to its expected
cardinality rather than to one.

Components are value-semantic and immutable after construction, so
mixtures can be shared freely across threads.  The Cholesky factor of
each covariance is computed once at construction and cached, because the
cross-likelihoods built on top of it are evaluated O(N_f * N_g) times per
cost call.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "InvalidCovarianceError",
    "cross_likelihood",
    "eval_density",
    "inner_product",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Reject covariances whose Cholesky pivots span more than this ratio:
# an explicit failure beats silently propagating NaNs downstream.
_PIVOT_RATIO = 1e-10
_SYMMETRY_RTOL = 1e-12


class InvalidCovarianceError(ValueError):
    """Covariance is asymmetric, indefinite, or numerically singular."""


def _readonly(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _spd_cholesky(cov: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Factor an SPD matrix, rejecting asymmetric or near-singular input."""
    gap = float(np.abs(cov - cov.T).max(initial=0.0))
    scale = float(np.abs(cov).max(initial=0.0))
    if gap > _SYMMETRY_RTOL * max(scale, 1e-300):
        raise InvalidCovarianceError(f"{name} is asymmetric: max |P - P^T| = {gap:.3e}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError(f"{name} is not positive definite") from exc
    pivots = np.diag(chol)
    if pivots.min() < _PIVOT_RATIO * pivots.max():
        raise InvalidCovarianceError(
            f"{name} is numerically singular "
            f"(Cholesky pivot ratio {pivots.min() / pivots.max():.3e})"
        )
    return chol


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian term of an intensity.

    Attributes:
        weight: Expected-count contribution of this component, >= 0.
        mean: State-space mean, shape (n_x,).  Units follow the model
            (position m, velocity m/s).
        cov: Symmetric positive-definite covariance, shape (n_x, n_x).
    """

    weight: float
    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", _readonly(self.mean, 1, "mean"))
        object.__setattr__(self, "cov", _readonly(self.cov, 2, "cov"))
        if not self.weight >= 0.0:
            raise ValueError(f"component weight must be >= 0, got {self.weight}")
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError(
                f"covariance shape {self.cov.shape} does not match state dim {n}"
            )
        chol = _spd_cholesky(self.cov)
        chol.setflags(write=False)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower-triangular Cholesky factor of the covariance (cached)."""
        return self._chol

    @classmethod
    def _trusted(cls, weight: float, mean: np.ndarray, cov: np.ndarray,
                 chol: np.ndarray) -> "GaussianComponent":
        """Construct without re-validating; for hot paths that already
        hold the Cholesky factor of a known-SPD covariance."""
        obj = object.__new__(cls)
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(obj, "weight", float(weight))
        object.__setattr__(obj, "mean", mean)
        object.__setattr__(obj, "cov", cov)
        object.__setattr__(obj, "_chol", chol)
        return obj

    def log_density(self, x: np.ndarray) -> float:
        """Log of the unweighted normal density N(x; mean, cov)."""
        x = np.asarray(x, dtype=float)
        if x.shape != self.mean.shape:
            raise ValueError(f"point has dim {x.shape}, component has dim {self.dim}")
        y = solve_triangular(self._chol, x - self.mean, lower=True)
        log_det = 2.0 * np.log(np.diag(self._chol)).sum()
        return -0.5 * (self.dim * _LOG_2PI + log_det + float(y @ y))


@dataclass(frozen=True)
class GaussianMixture:
    """Ordered collection of Gaussian components sharing one state space.

    The total mass sum(weights) is the expected cardinality of the swarm
    the mixture represents; it is finite and nonnegative but need not be
    an integer.
    """

    components: tuple[GaussianComponent, ...]
    dim: int

    def __init__(self, components, dim: int | None = None):
        components = tuple(components)
        if dim is None:
            if not components:
                raise ValueError("dim is required for an empty mixture")
            dim = components[0].dim
        for i, c in enumerate(components):
            if c.dim != dim:
                raise ValueError(
                    f"component {i} has dim {c.dim}, mixture has dim {dim}"
                )
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "dim", int(dim))
        mass = sum(c.weight for c in components)
        if not math.isfinite(mass):
            raise ValueError("mixture mass must be finite")

    def __len__(self) -> int:
        return len(self.components)

    def total_mass(self) -> float:
        """Expected cardinality: the sum of the component weights."""
        return float(sum(c.weight for c in self.components))

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def means(self) -> np.ndarray:
        """Stacked means, shape (n_components, dim)."""
        if not self.components:
            return np.zeros((0, self.dim))
        return np.array([c.mean for c in self.components])

    @property
    def covs(self) -> np.ndarray:
        """Stacked covariances, shape (n_components, dim, dim)."""
        if not self.components:
            return np.zeros((0, self.dim, self.dim))
        return np.array([c.cov for c in self.components])

    def scaled(self, factor: float) -> "GaussianMixture":
        """Mixture with every weight multiplied by ``factor`` >= 0."""
        return GaussianMixture(
            [GaussianComponent(factor * c.weight, c.mean, c.cov) for c in self.components],
            dim=self.dim,
        )

    @classmethod
    def from_arrays(cls, weights, means, covs, dim: int | None = None) -> "GaussianMixture":
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        comps = [
            GaussianComponent(w, m, p) for w, m, p in zip(weights, means, covs)
        ]
        if dim is None and len(comps) == 0:
            raise ValueError("dim is required for an empty mixture")
        return cls(comps, dim=dim if dim is not None else means.shape[1])

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "components": [
                {"w": c.weight, "mean": c.mean.tolist(), "cov": c.cov.tolist()}
                for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        comps = [
            GaussianComponent(entry["w"], entry["mean"], entry["cov"])
            for entry in data["components"]
        ]
        return cls(comps, dim=int(data["dim"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))


def eval_density(mix: GaussianMixture, x: np.ndarray) -> float:
    """Evaluate the mixture intensity at a point.

    Args:
        mix: Gaussian mixture intensity.
        x: Query point, shape (mix.dim,).

    Returns:
        sum_i w_i N(x; m_i, P_i); zero for an empty mixture.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (mix.dim,):
        raise ValueError(f"point shape {x.shape} does not match mixture dim {mix.dim}")
    total = 0.0
    for c in mix.components:
        total += c.weight * math.exp(c.log_density(x))
    return total


def cross_likelihood(a: GaussianComponent, b: GaussianComponent) -> float:
    """Gaussian cross-likelihood N(m_a; m_b, P_a + P_b).

    Equals the integral of the two unweighted component densities over
    the state space, and is symmetric in its arguments: both orders
    evaluate the same floating-point expression.
    """
    if a.dim != b.dim:
        raise ValueError(f"component dims differ: {a.dim} vs {b.dim}")
    cov_sum = a.cov + b.cov
    chol = _spd_cholesky(cov_sum, name="summed covariance")
    y = solve_triangular(chol, a.mean - b.mean, lower=True)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return math.exp(-0.5 * (a.dim * _LOG_2PI + log_det + float(y @ y)))


def inner_product(f: GaussianMixture, g: GaussianMixture) -> float:
    """L2 inner product <f, g> of two mixture intensities.

    Returns sum_j sum_i w_g^(j) w_f^(i) N(m_f^i; m_g^j, P_f^i + P_g^j),
    which is bilinear in the weights.  The summation order is fixed so
    results are deterministic.
    """
    if f.dim != g.dim:
        raise ValueError(f"mixture dims differ: {f.dim} vs {g.dim}")
    if len(f) == 0 or len(g) == 0:
        return 0.0
    wf, mf, pf = f.weights, f.means, f.covs
    wg, mg, pg = g.weights, g.means, g.covs
    diff = mg[:, None, :] - mf[None, :, :]
    cov_sum = pg[:, None, :, :] + pf[None, :, :, :]
    try:
        chol = np.linalg.cholesky(cov_sum)
    except np.linalg.LinAlgError as exc:
        raise InvalidCovarianceError("summed covariance is not positive definite") from exc
    log_det = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    sol = np.linalg.solve(cov_sum, diff[..., None])[..., 0]
    quad = (diff * sol).sum(axis=-1)
    dens = np.exp(-0.5 * (f.dim * _LOG_2PI + log_det + quad))
    return float(np.einsum("j,i,ji->", wg, wf, dens))
