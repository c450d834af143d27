"""GM-PHD filter: prediction, update, component management, extraction."""

import math

import numpy as np
import pytest

from rfswarm.dynamics import discretize_zoh, double_integrator
from rfswarm.gmix import GaussianComponent, GaussianMixture
from rfswarm.gmphd import (
    PhdModel,
    PruneParams,
    SensorModel,
    SpawnModel,
    estimate_states,
    phd_predict,
    phd_update,
    prune_merge,
)
from rfswarm.swarmsim import Agent, generate_measurements

from conftest import rel_err


def make_motion(dt=1.0, q=0.01):
    return discretize_zoh(double_integrator(), dt, q_proc=q)


def make_sensor(p_detect=0.9, noise=0.04, clutter=0.0, window=5.0):
    return SensorModel(
        p_detect=p_detect,
        h_mat=np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]),
        r_meas=noise * np.eye(2),
        clutter_rate=clutter,
        window=np.array([[-window, window], [-window, window]]),
    )


def uniform_mixture(means, weight=1.0, var=0.1):
    means = np.asarray(means, dtype=float)
    covs = np.repeat(var * np.eye(means.shape[1])[None], len(means), axis=0)
    return GaussianMixture.from_arrays(np.full(len(means), weight), means, covs)


class TestPredict:
    def test_identity_survival(self):
        motion = make_motion()
        ident = type(motion)(
            a_cont=motion.a_cont, b_cont=motion.b_cont,
            a_disc=np.eye(4), b_disc=motion.b_disc,
            q_proc=np.zeros((4, 4)), dt=1.0,
        )
        prior = uniform_mixture([[1.0, 2.0, 0.0, 0.0]])
        model = PhdModel(p_survive=1.0, birth=GaussianMixture([], dim=4), motion=ident)
        out = phd_predict(prior, model)
        assert np.array_equal(out.means, prior.means)
        assert np.array_equal(out.covs, prior.covs)
        assert np.array_equal(out.weights, prior.weights)

    def test_no_survival_leaves_birth(self):
        birth = uniform_mixture([[0.0, 0.0, 0.0, 0.0]], weight=0.25)
        prior = uniform_mixture([[1.0, 1.0, 0.0, 0.0]])
        model = PhdModel(p_survive=0.0, birth=birth, motion=make_motion())
        out = phd_predict(prior, model)
        assert out.total_mass() == pytest.approx(0.25)
        assert np.array_equal(out.means[-1], birth.means[0])

    def test_mass_bookkeeping(self):
        prior = uniform_mixture([[0, 0, 0, 0], [1, 1, 0, 0], [2, 2, 0, 0]])
        birth = uniform_mixture([[0, 0, 0, 0]], weight=0.1)
        model = PhdModel(p_survive=0.99, birth=birth, motion=make_motion())
        out = phd_predict(prior, model)
        assert out.total_mass() == pytest.approx(0.99 * 3 + 0.1, rel=1e-12)

    def test_controls_move_means(self):
        motion = make_motion(dt=1.0, q=0.0)
        prior = uniform_mixture([[0, 0, 0, 0]])
        model = PhdModel(p_survive=1.0, birth=GaussianMixture([], dim=4), motion=motion)
        out = phd_predict(prior, model, controls=np.array([[2.0, 0.0]]))
        assert out.means[0] == pytest.approx([1.0, 0.0, 2.0, 0.0])

    def test_spawn_components(self):
        prior = uniform_mixture([[1.0, 0.0, 0.0, 0.0]], weight=2.0)
        spawn = SpawnModel(
            weights=np.array([0.05]),
            f_mats=np.eye(4)[None],
            offsets=np.array([[0.5, 0.0, 0.0, 0.0]]),
            q_covs=(0.01 * np.eye(4))[None],
        )
        model = PhdModel(p_survive=1.0, birth=GaussianMixture([], dim=4),
                         motion=make_motion(q=0.0), spawn=spawn)
        out = phd_predict(prior, model)
        assert len(out) == 2
        assert out.weights[1] == pytest.approx(2.0 * 0.05)
        assert out.means[1] == pytest.approx([1.5, 0.0, 0.0, 0.0])

    def test_control_shape_mismatch(self):
        prior = uniform_mixture([[0, 0, 0, 0]])
        model = PhdModel(p_survive=1.0, birth=GaussianMixture([], dim=4), motion=make_motion())
        with pytest.raises(ValueError):
            phd_predict(prior, model, controls=np.zeros((2, 2)))


class TestUpdate:
    def test_reduces_to_kalman_update(self):
        sensor = make_sensor(p_detect=1.0, clutter=0.0)
        pred = uniform_mixture([[0.5, -0.5, 0.0, 0.0]], var=0.2)
        z = np.array([0.7, -0.3])
        out = phd_update(pred, [z], sensor)
        # Missed-detection copy carries zero weight at p_d = 1.
        assert out.weights[0] == 0.0
        c = out.components[1]
        p = pred.covs[0]
        h, r = sensor.h_mat, sensor.r_meas
        s = h @ p @ h.T + r
        k_gain = p @ h.T @ np.linalg.inv(s)
        mean_exp = pred.means[0] + k_gain @ (z - h @ pred.means[0])
        cov_exp = (np.eye(4) - k_gain @ h) @ p
        assert rel_err(c.mean, mean_exp) <= 1e-12
        assert rel_err(c.cov, 0.5 * (cov_exp + cov_exp.T)) <= 1e-12
        assert c.weight == pytest.approx(1.0)

    def test_no_detection_passes_prediction_through(self):
        sensor = make_sensor(p_detect=0.0, clutter=1.0)
        pred = uniform_mixture([[0, 0, 0, 0], [1, 1, 0, 0]])
        out = phd_update(pred, [np.array([0.5, 0.5])], sensor)
        assert np.array_equal(out.weights[:2], pred.weights)
        assert np.array_equal(out.means[:2], pred.means)
        assert sum(c.weight for c in out.components[2:]) == pytest.approx(0.0)

    def test_component_count(self):
        sensor = make_sensor(p_detect=0.9, clutter=2.0)
        pred = uniform_mixture([[0, 0, 0, 0], [1, 1, 0, 0], [2, 0, 0, 0]])
        zs = [np.array([0.1, 0.1]), np.array([1.0, 0.9])]
        out = phd_update(pred, zs, sensor)
        assert len(out) == 3 * (1 + 2)

    def test_mass_matches_scalar_recomputation(self, rng):
        sensor = make_sensor(p_detect=0.9, clutter=3.0, window=4.0)
        pred = uniform_mixture([[0, 0, 0, 0], [1.5, 0.5, 0, 0]], weight=0.8, var=0.3)
        zs = [rng.uniform(-1, 2, 2) for _ in range(2)]
        out = phd_update(pred, zs, sensor)

        h, r = sensor.h_mat, sensor.r_meas
        kappa = sensor.clutter_rate / 64.0
        expected = (1 - 0.9) * pred.total_mass()
        for z in zs:
            qs = []
            for c in pred.components:
                s = h @ c.cov @ h.T + r
                d = z - h @ c.mean
                q = math.exp(-0.5 * d @ np.linalg.inv(s) @ d) / (
                    2 * math.pi * math.sqrt(np.linalg.det(s)))
                qs.append(q)
            denom = kappa + 0.9 * sum(c.weight * q for c, q in zip(pred.components, qs))
            expected += sum(0.9 * c.weight * q / denom for c, q in zip(pred.components, qs))
        assert rel_err(out.total_mass(), expected) <= 1e-12

    def test_mass_conserved_without_clutter(self):
        # One clean measurement per true component at the predicted
        # positions keeps the expected count.
        sensor = make_sensor(p_detect=1.0, clutter=0.0)
        pred = uniform_mixture([[0, 0, 0, 0], [3, 3, 0, 0]], var=0.05)
        zs = [np.array([0.0, 0.0]), np.array([3.0, 3.0])]
        out = phd_update(pred, zs, sensor)
        assert out.total_mass() == pytest.approx(pred.total_mass(), abs=1e-6)


class TestPruneMerge:
    def test_noop_when_everything_distinct(self):
        mix = uniform_mixture([[0, 0, 0, 0], [5, 5, 0, 0]], weight=0.5, var=0.01)
        out = prune_merge(mix, PruneParams(trunc_thresh=0.1, merge_dist=2.0))
        assert len(out) == 2
        assert out.total_mass() == pytest.approx(1.0)

    def test_merges_identical_pair(self):
        c = GaussianComponent(0.5, [1.0, 2.0, 0.0, 0.0], 0.1 * np.eye(4))
        out = prune_merge(GaussianMixture([c, c]), PruneParams())
        assert len(out) == 1
        assert out.weights[0] == pytest.approx(1.0)
        assert np.allclose(out.means[0], c.mean)
        assert np.allclose(out.covs[0], c.cov)

    def test_moment_matched_merge(self):
        a = GaussianComponent(1.0, [0.0, 0, 0, 0], 0.1 * np.eye(4))
        b = GaussianComponent(1.0, [0.2, 0, 0, 0], 0.1 * np.eye(4))
        out = prune_merge(GaussianMixture([a, b]), PruneParams(merge_dist=4.0))
        assert len(out) == 1
        assert out.means[0][0] == pytest.approx(0.1)
        # Merged covariance picks up the spread of the means.
        assert out.covs[0][0, 0] == pytest.approx(0.1 + 0.01, rel=1e-9)

    def test_mass_changes_only_through_truncation(self, rng):
        comps = []
        for _ in range(50):
            comps.append(GaussianComponent(
                float(rng.uniform(0, 0.5)), rng.uniform(-5, 5, 4), 0.05 * np.eye(4)))
        mix = GaussianMixture(comps)
        params = PruneParams(trunc_thresh=0.05, merge_dist=1.0, max_components=300)
        out = prune_merge(mix, params)
        truncated = sum(c.weight for c in comps if c.weight < params.trunc_thresh)
        assert out.total_mass() == pytest.approx(mix.total_mass() - truncated, abs=1e-12)

    def test_cap_keeps_heaviest(self):
        comps = [GaussianComponent(w, [5.0 * w, 0, 0, 0], 0.001 * np.eye(4))
                 for w in (0.1, 0.9, 0.5, 0.7)]
        out = prune_merge(GaussianMixture(comps), PruneParams(merge_dist=0.5, max_components=2))
        assert len(out) == 2
        assert set(np.round(out.weights, 6)) == {0.9, 0.7}


class TestEstimateStates:
    def test_empty(self):
        card, states = estimate_states(GaussianMixture([], dim=4))
        assert card == 0 and states == []

    def test_unit_weights(self):
        mix = uniform_mixture([[0, 0, 0, 0], [1, 1, 0, 0], [2, 2, 0, 0]])
        card, states = estimate_states(mix)
        assert card == 3
        assert len(states) == 3

    def test_rounding_and_threshold(self):
        comps = [
            GaussianComponent(0.9, [0.0, 0, 0, 0], 0.1 * np.eye(4)),
            GaussianComponent(0.6, [1.0, 0, 0, 0], 0.1 * np.eye(4)),
            GaussianComponent(0.3, [2.0, 0, 0, 0], 0.1 * np.eye(4)),
        ]
        card, states = estimate_states(GaussianMixture(comps))
        assert card == 2
        assert len(states) == 2
        assert states[0][0] == pytest.approx(0.0)
        assert states[1][0] == pytest.approx(1.0)


class TestKalmanDegeneracy:
    def test_filter_equals_kalman_over_100_steps(self, rng):
        # p_s = p_d = 1, no birth/spawn/clutter, one measurement per
        # step: the intensity is a single component following the
        # textbook filter exactly.
        motion = make_motion(dt=1.0, q=0.01)
        sensor = make_sensor(p_detect=1.0, noise=0.04, clutter=0.0)
        model = PhdModel(p_survive=1.0, birth=GaussianMixture([], dim=4), motion=motion)
        mix = uniform_mixture([[0.5, -0.2, 0.05, 0.02]], var=0.1)
        km = mix.means[0].copy()
        kp = mix.covs[0].copy()
        a, q = motion.a_disc, motion.q_proc
        h, r = sensor.h_mat, sensor.r_meas
        truth = np.array([0.5, -0.2])
        for _ in range(100):
            z = truth + 0.2 * rng.standard_normal(2)
            mix = prune_merge(phd_update(phd_predict(mix, model), [z], sensor), PruneParams())
            km_pred = a @ km
            kp_pred = a @ kp @ a.T + q
            s = h @ kp_pred @ h.T + r
            gain = kp_pred @ h.T @ np.linalg.inv(s)
            km = km_pred + gain @ (z - h @ km_pred)
            kp = (np.eye(4) - gain @ h) @ kp_pred
            assert len(mix) == 1
            assert np.abs(mix.means[0] - km).max() <= 1e-10
            assert np.abs(mix.covs[0] - 0.5 * (kp + kp.T)).max() <= 1e-10
            assert abs(mix.weights[0] - 1.0) <= 1e-10


class TestMonteCarloCardinality:
    def test_mean_cardinality_error_small(self):
        # Five stationary well-separated agents, 20 scans per run,
        # 200 seeded runs: the averaged cardinality error stays under
        # one agent.
        motion = make_motion(dt=1.0, q=1e-6)
        sensor = make_sensor(p_detect=0.95, noise=0.01, clutter=2.0, window=6.0)
        positions = np.array([[-4.0, -4.0], [-2.0, 2.0], [0.0, -2.0], [2.0, 3.0], [4.0, 0.0]])
        states = np.hstack([positions, np.zeros((5, 2))])
        birth = GaussianMixture(
            [GaussianComponent(0.2, np.zeros(4), np.diag([9.0, 9.0, 0.01, 0.01]))])
        model = PhdModel(p_survive=0.99, birth=birth, motion=motion)
        agents = [Agent(id=i, state=s) for i, s in enumerate(states)]

        errors = []
        for seed in range(200):
            rng = np.random.default_rng(10_000 + seed)
            mix = GaussianMixture([], dim=4)
            run_err = []
            for _ in range(20):
                scan = generate_measurements(agents, sensor, rng)
                mix = prune_merge(phd_update(phd_predict(mix, model), scan, sensor),
                                  PruneParams(trunc_thresh=1e-5, merge_dist=4.0))
                card, _ = estimate_states(mix)
                run_err.append(abs(card - 5))
            # Skip the two-scan warmup while weights build.
            errors.append(np.mean(run_err[2:]))
        assert np.mean(errors) <= 1.0


class TestSensorModelValidation:
    def test_bad_probability(self):
        with pytest.raises(ValueError):
            make_sensor(p_detect=1.5)

    def test_clutter_density(self):
        sensor = make_sensor(clutter=5.0, window=2.0)
        assert sensor.clutter_density == pytest.approx(5.0 / 16.0)

    def test_window_shape(self):
        with pytest.raises(ValueError):
            SensorModel(
                p_detect=0.9, h_mat=np.eye(2, 4), r_meas=np.eye(2),
                clutter_rate=1.0, window=np.zeros((3, 2)),
            )
