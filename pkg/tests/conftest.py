"""Shared fixtures and numerical oracles for the test suite."""

import math

import numpy as np
import pytest

from rfswarm.gmix import GaussianComponent, GaussianMixture


def rand_spd(n, rng, scale=1.0):
    """Random symmetric positive-definite matrix with eigenvalues O(scale)."""
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + np.eye(n))


def rand_mixture(n_comp, dim, rng, weight_lo=0.3, weight_hi=2.0, spread=2.0, cov_scale=0.5):
    """Random mixture with well-conditioned covariances."""
    weights = rng.uniform(weight_lo, weight_hi, n_comp)
    means = rng.uniform(-spread, spread, (n_comp, dim))
    covs = np.array([rand_spd(dim, rng, cov_scale) for _ in range(n_comp)])
    return GaussianMixture.from_arrays(weights, means, covs)


def gauss_grid_integral(integrand_components, lo, hi, n_points):
    """Tensor-grid trapezoid integral of a product of Gaussians.

    integrand_components: list of (mean, cov) pairs multiplied pointwise.
    Exponentially accurate for analytic integrands that decay inside the
    box, which products of Gaussians do.
    """
    dim = len(lo)
    axes = [np.linspace(lo[d], hi[d], n_points) for d in range(dim)]
    if dim == 1:
        pts = axes[0][:, None]
    elif dim == 2:
        gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    else:
        raise ValueError("grid oracle supports 1-D and 2-D only")
    total = np.ones(pts.shape[0])
    for mean, cov in integrand_components:
        diff = pts - mean
        inv = np.linalg.inv(cov)
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        norm = 1.0 / math.sqrt((2 * math.pi) ** dim * np.linalg.det(cov))
        total = total * (norm * np.exp(-0.5 * quad))
    value = total.reshape((n_points,) * dim)
    for d in range(dim):
        value = np.trapezoid(value, axes[d], axis=0)
    return float(value)


def pair_box(mean_a, cov_a, mean_b, cov_b, n_sigma=8.0):
    """Integration box covering both components out to n_sigma."""
    sig_a = np.sqrt(np.diag(cov_a))
    sig_b = np.sqrt(np.diag(cov_b))
    lo = np.minimum(mean_a - n_sigma * sig_a, mean_b - n_sigma * sig_b)
    hi = np.maximum(mean_a + n_sigma * sig_a, mean_b + n_sigma * sig_b)
    return lo, hi


def quad_inner_product(f: GaussianMixture, g: GaussianMixture, n_points=801):
    """<f, g> by pairwise tensor-grid quadrature (independent oracle)."""
    total = 0.0
    for cf in f.components:
        for cg in g.components:
            lo, hi = pair_box(cf.mean, cf.cov, cg.mean, cg.cov)
            val = gauss_grid_integral(
                [(cf.mean, cf.cov), (cg.mean, cg.cov)], lo, hi, n_points)
            total += cf.weight * cg.weight * val
    return total


def quad_pair_integrals(f: GaussianMixture, g: GaussianMixture, n_points=801):
    """Matrix of pairwise cross integrals int N_f^i N_g^j dx."""
    out = np.zeros((len(f), len(g)))
    for i, cf in enumerate(f.components):
        for j, cg in enumerate(g.components):
            lo, hi = pair_box(cf.mean, cf.cov, cg.mean, cg.cov)
            out[i, j] = gauss_grid_integral(
                [(cf.mean, cf.cov), (cg.mean, cg.cov)], lo, hi, n_points)
    return out


def rel_err(a, b, floor=1e-300):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
