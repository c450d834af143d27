"""Mixture representation and Gaussian cross-likelihood primitives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfswarm.gmix import (
    GaussianComponent,
    GaussianMixture,
    InvalidCovarianceError,
    cross_likelihood,
    eval_density,
    inner_product,
)

from conftest import gauss_grid_integral, pair_box, quad_inner_product, rand_mixture, rel_err

STD_NORMAL_PEAK = 1.0 / math.sqrt(2.0 * math.pi)


class TestEvalDensity:
    def test_standard_normal_at_mean(self):
        mix = GaussianMixture([GaussianComponent(1.0, [0.0], [[1.0]])])
        assert eval_density(mix, np.array([0.0])) == pytest.approx(STD_NORMAL_PEAK, abs=1e-9)

    def test_empty_mixture_is_zero(self):
        mix = GaussianMixture([], dim=3)
        assert eval_density(mix, np.zeros(3)) == 0.0

    def test_matches_naive_summation(self, rng):
        mix = rand_mixture(2, 2, rng)
        x = rng.uniform(-2, 2, 2)
        expected = 0.0
        for c in mix.components:
            inv = np.linalg.inv(c.cov)
            d = x - c.mean
            norm = 1.0 / math.sqrt((2 * math.pi) ** 2 * np.linalg.det(c.cov))
            expected += c.weight * norm * math.exp(-0.5 * d @ inv @ d)
        assert rel_err(eval_density(mix, x), expected) <= 1e-12

    def test_nonnegative_and_mass_integral(self, rng):
        for dim in (1, 2):
            mix = rand_mixture(3, dim, rng, spread=1.0)
            means = mix.means
            sig = np.sqrt(np.array([np.diag(c.cov) for c in mix.components]))
            lo = (means - 8 * sig).min(axis=0)
            hi = (means + 8 * sig).max(axis=0)
            n_pts = 1201 if dim == 1 else 501
            axes = [np.linspace(lo[d], hi[d], n_pts) for d in range(dim)]
            if dim == 1:
                vals = np.array([eval_density(mix, np.array([x])) for x in axes[0]])
                integral = np.trapezoid(vals, axes[0])
            else:
                gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
                pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
                vals = np.array([eval_density(mix, p) for p in pts]).reshape(n_pts, n_pts)
                integral = np.trapezoid(np.trapezoid(vals, axes[1], axis=1), axes[0])
            assert vals.min() >= 0.0
            assert rel_err(integral, mix.total_mass()) <= 1e-4

    def test_dimension_mismatch_raises(self):
        mix = GaussianMixture([GaussianComponent(1.0, [0.0, 0.0], np.eye(2))])
        with pytest.raises(ValueError):
            eval_density(mix, np.zeros(3))


class TestCrossLikelihood:
    def test_coincident_means(self):
        a = GaussianComponent(1.0, [0.0], [[0.5]])
        b = GaussianComponent(1.0, [0.0], [[0.5]])
        assert cross_likelihood(a, b) == pytest.approx(STD_NORMAL_PEAK, abs=1e-9)

    def test_two_sigma_apart(self):
        a = GaussianComponent(1.0, [2.0], [[0.5]])
        b = GaussianComponent(1.0, [0.0], [[0.5]])
        assert cross_likelihood(a, b) == pytest.approx(STD_NORMAL_PEAK * math.exp(-2.0), rel=1e-9)

    def test_equals_product_integral(self, rng):
        from conftest import rand_spd

        a = GaussianComponent(1.0, rng.uniform(-1, 1, 2), rand_spd(2, rng, 0.5))
        b = GaussianComponent(1.0, rng.uniform(-1, 1, 2), rand_spd(2, rng, 0.5))
        lo, hi = pair_box(a.mean, a.cov, b.mean, b.cov, n_sigma=6.0)
        oracle = gauss_grid_integral([(a.mean, a.cov), (b.mean, b.cov)], lo, hi, 801)
        assert rel_err(cross_likelihood(a, b), oracle) <= 1e-6

    def test_exact_symmetry(self, rng):
        from conftest import rand_spd

        for _ in range(20):
            a = GaussianComponent(1.0, rng.uniform(-3, 3, 3), rand_spd(3, rng))
            b = GaussianComponent(1.0, rng.uniform(-3, 3, 3), rand_spd(3, rng))
            assert cross_likelihood(a, b) == cross_likelihood(b, a)

    def test_dimension_mismatch(self):
        a = GaussianComponent(1.0, [0.0], [[1.0]])
        b = GaussianComponent(1.0, [0.0, 0.0], np.eye(2))
        with pytest.raises(ValueError):
            cross_likelihood(a, b)


class TestInnerProduct:
    def test_single_component_self(self):
        f = GaussianMixture([GaussianComponent(1.0, [0.0], [[0.5]])])
        assert inner_product(f, f) == pytest.approx(STD_NORMAL_PEAK, abs=1e-9)

    def test_zero_weights(self, rng):
        f = rand_mixture(2, 2, rng)
        g = GaussianMixture(
            [GaussianComponent(0.0, c.mean, c.cov) for c in rand_mixture(3, 2, rng).components]
        )
        assert inner_product(f, g) == 0.0

    def test_matches_quadrature(self, rng):
        f = rand_mixture(3, 2, rng, spread=1.0)
        g = rand_mixture(2, 2, rng, spread=1.0)
        assert rel_err(inner_product(f, g), quad_inner_product(f, g, n_points=401)) <= 1e-6

    def test_matches_pairwise_cross_likelihood(self, rng):
        f = rand_mixture(3, 2, rng)
        g = rand_mixture(2, 2, rng)
        naive = sum(
            cg.weight * cf.weight * cross_likelihood(cf, cg)
            for cg in g.components
            for cf in f.components
        )
        assert rel_err(inner_product(f, g), naive) <= 1e-12

    @given(alpha=st.floats(0.1, 10.0), seed=st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_weight_scaling_bilinear(self, alpha, seed):
        rng = np.random.default_rng(seed)
        f = rand_mixture(2, 2, rng)
        g = rand_mixture(2, 2, rng)
        assert rel_err(inner_product(f.scaled(alpha), g), alpha * inner_product(f, g)) <= 1e-12


class TestValidation:
    def test_negative_weight(self):
        with pytest.raises(ValueError):
            GaussianComponent(-0.1, [0.0], [[1.0]])

    def test_asymmetric_covariance(self):
        cov = np.array([[1.0, 0.5], [0.2, 1.0]])
        with pytest.raises(InvalidCovarianceError):
            GaussianComponent(1.0, [0.0, 0.0], cov)

    def test_indefinite_covariance(self):
        with pytest.raises(InvalidCovarianceError):
            GaussianComponent(1.0, [0.0, 0.0], np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_near_singular_covariance(self):
        cov = np.diag([1.0, 1e-24])
        with pytest.raises(InvalidCovarianceError):
            GaussianComponent(1.0, [0.0, 0.0], cov)

    def test_mixture_dim_consistency(self):
        a = GaussianComponent(1.0, [0.0], [[1.0]])
        b = GaussianComponent(1.0, [0.0, 0.0], np.eye(2))
        with pytest.raises(ValueError):
            GaussianMixture([a, b])

    def test_empty_needs_dim(self):
        with pytest.raises(ValueError):
            GaussianMixture([])

    def test_components_are_immutable(self):
        c = GaussianComponent(1.0, [0.0], [[1.0]])
        with pytest.raises(ValueError):
            c.mean[0] = 1.0


class TestSerialization:
    def test_json_round_trip(self, rng):
        mix = rand_mixture(3, 2, rng)
        back = GaussianMixture.from_json(mix.to_json())
        assert back.dim == mix.dim
        assert np.array_equal(back.weights, mix.weights)
        assert np.array_equal(back.means, mix.means)
        assert np.array_equal(back.covs, mix.covs)

    def test_schema_fields(self):
        mix = GaussianMixture([GaussianComponent(2.0, [1.0, 2.0], np.eye(2))])
        data = mix.to_dict()
        assert data["dim"] == 2
        assert data["components"][0]["w"] == 2.0
        assert data["components"][0]["mean"] == [1.0, 2.0]
