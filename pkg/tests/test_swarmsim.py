"""Agent simulation, assignment, star targets, scenario plumbing."""

import json
import math

import numpy as np
import pytest

from rfswarm.dynamics import OrbitParams
from rfswarm.gmphd import SensorModel
from rfswarm.swarmsim import (
    Agent,
    Scenario,
    ScenarioError,
    StarGeometry,
    bundled_scenario,
    bundled_scenario_names,
    generate_measurements,
    mahalanobis_assign,
    nearest_target_distances,
    rotating_star_targets,
    run_scenario,
    star_perimeter_points,
    validate_scenario_dict,
)

from conftest import rel_err

N_LEO = 0.00110678


def tiny_scenario(**overrides):
    data = {
        "schema": 1,
        "name": "tiny",
        "seed": 7,
        "model": {"kind": "double_integrator", "dt": 0.01, "q_proc": 1e-6,
                  "cost_covariance": "hold"},
        "horizon_steps": 8,
        "initial": {"positions": [[1.5, 0.0], [-1.5, 0.0]],
                     "position_std": 0.447, "velocity_std": 10.0},
        "targets": {"kind": "static", "positions": [[1.0, 0.0], [-1.0, 0.0]]},
        "distance": {"kind": "l2_quadratic", "alpha": 5e-6},
        "controller": {"kind": "ilqr", "control_weight": 1e-9, "max_iters": 30, "tol": 1e-6},
        "estimation": {"mode": "perfect"},
        "agents_per_component": 3,
    }
    data.update(overrides)
    return data


class TestMahalanobisAssign:
    def test_identity_metric_is_euclidean(self, rng):
        means = rng.uniform(-3, 3, (4, 2))
        covs = np.repeat(np.eye(2)[None], 4, axis=0)
        states = rng.uniform(-3, 3, (10, 2))
        assign = mahalanobis_assign(states, means, covs)
        euclid = np.argmin(
            np.linalg.norm(states[:, None] - means[None], axis=2), axis=1)
        assert np.array_equal(assign, euclid)

    def test_agent_at_mean(self):
        means = np.array([[0.0, 0.0], [2.0, 2.0]])
        covs = np.repeat(np.eye(2)[None], 2, axis=0)
        assert mahalanobis_assign(means[1][None], means, covs)[0] == 1

    def test_anisotropic_beats_euclidean(self):
        # Point at (1.1, 0): Euclidean-closer to component A at (0, 0),
        # but A is tight while B at (3, 0) stretches along x.
        means = np.array([[0.0, 0.0], [3.0, 0.0]])
        covs = np.array([np.diag([0.01, 0.01]), np.diag([4.0, 0.01])])
        point = np.array([[1.1, 0.0]])
        euclid = np.argmin(np.linalg.norm(point - means, axis=1))
        assert euclid == 0
        # D_M to A: 1.1/0.1 = 11; to B: 1.9/2 = 0.95.
        assert mahalanobis_assign(point, means, covs)[0] == 1

    def test_ties_break_low_index(self):
        means = np.array([[-1.0, 0.0], [1.0, 0.0]])
        covs = np.repeat(np.eye(2)[None], 2, axis=0)
        assert mahalanobis_assign(np.zeros((1, 2)), means, covs)[0] == 0

    def test_empty_mixture_rejected(self):
        with pytest.raises(ValueError):
            mahalanobis_assign(np.zeros((1, 2)), np.zeros((0, 2)), np.zeros((0, 2, 2)))


class TestRotatingStar:
    def orbit(self):
        return OrbitParams.from_mean_motion(N_LEO)

    def test_full_revolution_is_identity(self):
        period = 2 * math.pi / N_LEO
        a = rotating_star_targets(77, 0.0, self.orbit())
        b = rotating_star_targets(77, period, self.orbit())
        assert np.abs(a.means - b.means).max() <= 1e-9

    def test_mass_is_point_count(self):
        mix = rotating_star_targets(77, 12.0, self.orbit())
        assert mix.total_mass() == pytest.approx(77.0)

    def test_rigid_rotation_preserves_distances(self):
        a = rotating_star_targets(20, 0.0, self.orbit())
        b = rotating_star_targets(20, 1000.0, self.orbit())
        da = np.linalg.norm(a.means[:, None, :2] - a.means[None, :, :2], axis=2)
        db = np.linalg.norm(b.means[:, None, :2] - b.means[None, :, :2], axis=2)
        assert np.abs(da - db).max() <= 1e-9

    def test_velocities_match_rigid_field(self):
        mix = rotating_star_targets(10, 500.0, self.orbit())
        pos = mix.means[:, :2]
        vel = mix.means[:, 2:]
        expected = N_LEO * np.stack([-pos[:, 1], pos[:, 0]], axis=1)
        assert rel_err(vel, expected) <= 1e-12

    def test_outline_points_on_star(self):
        geometry = StarGeometry()
        pts = star_perimeter_points(100, geometry)
        radii = np.linalg.norm(pts, axis=1)
        assert radii.max() <= geometry.outer_radius + 1e-12
        assert radii.min() >= geometry.inner_radius - 1e-12

    def test_six_state_embedding(self):
        mix = rotating_star_targets(5, 0.0, self.orbit(), dim=6)
        assert mix.dim == 6
        assert np.abs(mix.means[:, 2]).max() == 0.0  # z
        assert np.abs(mix.means[:, 5]).max() == 0.0  # zdot


class TestGenerateMeasurements:
    def sensor(self, p_detect, clutter, noise=1e-18):
        return SensorModel(
            p_detect=p_detect,
            h_mat=np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]),
            r_meas=noise * np.eye(2),
            clutter_rate=clutter,
            window=np.array([[-5.0, 5.0], [-5.0, 5.0]]),
        )

    def agents(self, rng, n=10):
        return [Agent(id=i, state=np.concatenate([rng.uniform(-3, 3, 2), np.zeros(2)]))
                for i in range(n)]

    def test_perfect_detection_no_clutter(self, rng):
        agents = self.agents(rng)
        scans = generate_measurements(agents, self.sensor(1.0, 0.0), np.random.default_rng(0))
        assert len(scans) == len(agents)
        got = sorted(tuple(np.round(z, 6)) for z in scans)
        want = sorted(tuple(np.round(a.state[:2], 6)) for a in agents)
        assert got == want

    def test_no_detection_no_clutter(self, rng):
        scans = generate_measurements(self.agents(rng), self.sensor(0.0, 0.0),
                                      np.random.default_rng(0))
        assert scans == []

    def test_expected_count(self, rng):
        agents = self.agents(rng, n=10)
        sensor = self.sensor(0.9, 3.0, noise=0.01)
        gen = np.random.default_rng(1234)
        counts = [len(generate_measurements(agents, sensor, gen)) for _ in range(10000)]
        assert np.mean(counts) == pytest.approx(0.9 * 10 + 3.0, abs=0.1)


class TestScenarioValidation:
    def test_valid_round_trip(self):
        scn = Scenario.from_dict(tiny_scenario())
        again = Scenario.from_dict(json.loads(json.dumps(scn.to_dict())))
        assert again == scn

    def test_missing_dt_names_field(self):
        data = tiny_scenario()
        del data["model"]["dt"]
        errors = validate_scenario_dict(data)
        assert errors and errors[0][0] == "model.dt"
        with pytest.raises(ScenarioError) as err:
            Scenario.from_dict(data)
        assert "model.dt" in str(err.value)

    def test_negative_alpha_names_field(self):
        data = tiny_scenario()
        data["distance"]["alpha"] = -0.5
        errors = validate_scenario_dict(data)
        assert ("distance.alpha", errors[0][1]) == errors[0]

    def test_non_spd_covariance_names_component(self):
        data = tiny_scenario()
        data["initial"]["covariances"] = [np.eye(4).tolist(),
                                          (-np.eye(4)).tolist()]
        errors = validate_scenario_dict(data)
        assert errors[0][0] == "initial.covariances[1]"

    def test_bad_controller_kind(self):
        data = tiny_scenario()
        data["controller"]["kind"] = "pid"
        assert validate_scenario_dict(data)[0][0] == "controller.kind"

    def test_star_requires_relative_motion_model(self):
        data = tiny_scenario()
        data["targets"] = {"kind": "rotating_star", "n_points": 10}
        fields = [f for f, _ in validate_scenario_dict(data)]
        assert "targets.kind" in fields

    def test_bundled_scenarios_all_validate(self):
        for name in bundled_scenario_names():
            scn = bundled_scenario(name)
            assert validate_scenario_dict(scn.to_dict()) == []


class TestRunScenario:
    def test_log_shapes(self):
        scn = Scenario.from_dict(tiny_scenario())
        log = run_scenario(scn)
        n = scn.horizon_steps
        assert len(log.times) == n + 1
        assert len(log.intensity_means) == n + 1
        assert len(log.controls) == n
        assert log.agent_states.shape == (n + 1, 6, 4)
        assert log.step_costs.shape == (n,)

    def test_bit_identical_rerun(self):
        scn = Scenario.from_dict(tiny_scenario())
        a = run_scenario(scn)
        b = run_scenario(scn)
        assert np.array_equal(a.agent_states, b.agent_states)
        assert all(np.array_equal(x, y)
                   for x, y in zip(a.intensity_means, b.intensity_means))
        assert np.array_equal(a.step_costs, b.step_costs)
        assert a.export_dict() == b.export_dict()

    def test_seed_changes_agents_not_plan(self):
        scn = Scenario.from_dict(tiny_scenario())
        a = run_scenario(scn)
        b = run_scenario(scn.with_seed(scn.seed + 1))
        # Deterministic initial means => identical planned trajectories,
        # different sampled agents and noise.
        assert np.array_equal(a.intensity_means[-1], b.intensity_means[-1])
        assert not np.array_equal(a.agent_states, b.agent_states)

    def test_agents_follow_assigned_components(self):
        scn = Scenario.from_dict(tiny_scenario())
        log = run_scenario(scn)
        final_agents = log.agent_states[-1]
        final_means = log.intensity_means[-1]
        d = np.linalg.norm(
            final_agents[:, None, :2] - final_means[None, :, :2], axis=2).min(axis=1)
        assert d.max() <= 1.0

    def test_gmphd_mode_logs_estimates(self):
        data = tiny_scenario()
        data["horizon_steps"] = 6
        data["initial"] = {"uniform_positions": {"low": -1.0, "high": 1.0, "count": 4},
                            "position_std": 0.2, "velocity_std": 0.3}
        data["targets"] = {"kind": "static", "positions": [[0.5, 0.5], [-0.5, -0.5]]}
        data["controller"] = {"kind": "ilqr", "control_weight": 1e-4,
                               "replan_horizon": 3, "replan_iters": 4, "u_max": 0.1,
                               "max_iters": 10, "tol": 1e-5}
        data["estimation"] = {
            "mode": "gmphd", "p_detect": 0.95, "clutter_rate": 1.0,
            "meas_noise_var": 0.01, "window": [[-2.0, 2.0], [-2.0, 2.0]],
            "p_survive": 0.99, "birth": {"mass": 0.3, "position_std": 1.0,
                                          "velocity_std": 0.2},
            "schedule": {"births": {"0": 4}, "deaths": {}},
        }
        data["model"]["dt"] = 1.0
        log = run_scenario(Scenario.from_dict(data))
        assert log.estimation_mode == "gmphd"
        assert len(log.measurements) == 6
        assert log.cardinality_est is not None
        assert len(log.estimates) == 6
        # Rerun reproduces everything bit for bit.
        log2 = run_scenario(Scenario.from_dict(data))
        assert log.export_dict() == log2.export_dict()


class TestNearestTargetDistances:
    def test_basic(self):
        means = np.array([[0.0, 0.0, 9.9, 9.9], [3.0, 4.0, 0.0, 0.0]])
        targets = np.array([[0.0, 1.0, 0, 0], [3.0, 0.0, 0, 0]])
        d = nearest_target_distances(means, targets, 2)
        assert d[0] == pytest.approx(1.0)
        assert d[1] == pytest.approx(4.0)
