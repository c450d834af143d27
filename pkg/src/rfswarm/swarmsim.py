"""Agent-level swarm simulation and scenario orchestration.

A scenario describes one experiment declaratively: plant model, initial
intensity, desired mixture (static targets or a rotating star), distance
kind, controller, estimation mode, and seed.  Running it produces a
SimLog holding the full time-indexed record of intensities, agents,
measurements, estimates, controls, and costs.

Two estimation modes exist.  With perfect information the controller
plans directly on the intensity statistics; agents are then steered
open-loop with the control of whichever component they currently belong
to under the Mahalanobis distance.  With a GM-PHD filter in the loop,
measurements (detections, noise, Poisson clutter) are generated from the
true agents, the filter produces intensity estimates, the controller
plans on those estimates, and the resulting per-component controls feed
both the agents and the filter's next prediction.

Runs are reproducible: one seeded generator drives every draw in a fixed
order, so identical scenarios give bit-identical logs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .divergence import DistanceKind, mixture_distance
from .dynamics import (
    LinearModel,
    OrbitParams,
    cwh_model,
    cwh_planar_model,
    discretize_zoh,
    double_integrator,
    propagate_covariance,
)
from .gmix import GaussianComponent, GaussianMixture
from .gmphd import (
    PhdModel,
    PruneParams,
    SensorModel,
    estimate_states,
    phd_predict,
    phd_update,
    prune_merge,
)
from .ilqr import (
    IlqrOptions,
    IlqrProblem,
    MixtureStageCost,
    MixtureTerminalCost,
    MixtureTrajectoryCost,
    StackedDynamics,
    ilqr_solve,
)
from .mpc import MpcConfig, QnOptions, plan_receding

__all__ = [
    "Agent",
    "Scenario",
    "ScenarioError",
    "SimLog",
    "StarGeometry",
    "bundled_scenario",
    "bundled_scenario_names",
    "control_setup",
    "generate_measurements",
    "mahalanobis_assign",
    "nearest_target_distances",
    "rotating_star_targets",
    "run_scenario",
    "star_perimeter_points",
    "validate_scenario_dict",
]

_MODEL_KINDS = ("double_integrator", "cwh_planar", "cwh")
_DISTANCE_KINDS = ("cauchy_schwarz", "l2", "l2_quadratic")


class ScenarioError(ValueError):
    """Scenario validation failure; names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class Agent:
    """One physical swarm member with a birth/death window."""

    id: int
    state: np.ndarray
    birth_step: int = 0
    death_step: int | None = None

    def alive_at(self, k: int) -> bool:
        return self.birth_step <= k and (self.death_step is None or k < self.death_step)


# ---------------------------------------------------------------------------
# Assignment and target geometry.
# ---------------------------------------------------------------------------


def mahalanobis_assign(states: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Map each agent state to its closest component.

    Closeness is the covariance-weighted distance
    sqrt((x - m)' P^-1 (x - m)); ties break toward the lowest component
    index.  Assignment is re-evaluated every step as the swarm evolves.

    Args:
        states: Agent states, shape (n_agents, n_x).
        means: Component means, shape (n_comp, n_x).
        covs: Component covariances, shape (n_comp, n_x, n_x).

    Returns:
        Component index per agent, shape (n_agents,).
    """
    states = np.atleast_2d(np.asarray(states, float))
    means = np.atleast_2d(np.asarray(means, float))
    if means.shape[0] == 0:
        raise ValueError("cannot assign agents to an empty mixture")
    if states.shape[1] != means.shape[1]:
        raise ValueError("agent and component dimensions differ")
    d2 = np.empty((states.shape[0], means.shape[0]))
    for i in range(means.shape[0]):
        diff = states - means[i]
        try:
            sol = np.linalg.solve(covs[i], diff.T)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"singular covariance for component {i}") from exc
        d2[:, i] = np.einsum("ij,ji->i", diff, sol)
    return np.argmin(d2, axis=1)


@dataclass(frozen=True)
class StarGeometry:
    """Five-pointed star outline traced by the target pattern."""

    n_spikes: int = 5
    outer_radius: float = 1.0
    inner_radius: float = 0.382
    phase: float = math.pi / 2.0  # first spike points along +y

    def outline(self) -> np.ndarray:
        """Closed polygon vertices alternating outer/inner radii."""
        k = np.arange(2 * self.n_spikes)
        angles = self.phase + k * math.pi / self.n_spikes
        radii = np.where(k % 2 == 0, self.outer_radius, self.inner_radius)
        pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        return np.vstack([pts, pts[:1]])


def star_perimeter_points(n_points: int, geometry: StarGeometry | None = None) -> np.ndarray:
    """Points equally spaced by arc length along the star outline."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    geometry = geometry or StarGeometry()
    verts = geometry.outline()
    seg = np.diff(verts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    s_vals = np.arange(n_points) * total / n_points
    idx = np.searchsorted(cum, s_vals, side="right") - 1
    idx = np.clip(idx, 0, len(seg_len) - 1)
    frac = (s_vals - cum[idx]) / seg_len[idx]
    return verts[idx] + frac[:, None] * seg[idx]


def rotating_star_targets(
    n_points: int,
    t: float,
    orbit: OrbitParams,
    geometry: StarGeometry | None = None,
    position_var: float = 0.01,
    velocity_var: float = 1e-4,
    dim: int = 4,
) -> GaussianMixture:
    """Star-shaped desired mixture rotating counterclockwise at rate n.

    The outline points are rigidly rotated by n * t and each component's
    velocity is set to the rigid-rotation field n * (-y, x).  Weights
    are uniform and sum to n_points.

    Args:
        n_points: Number of components placed along the outline.
        t: Time in seconds.
        orbit: Supplies the rotation rate n_freq.
        geometry: Star shape; default unit outer radius.
        position_var, velocity_var: Diagonal covariance entries.
        dim: 4 for planar states, 6 to embed in the 3-D state.

    Returns:
        Mixture with mass n_points.
    """
    base = star_perimeter_points(n_points, geometry)
    n = orbit.n_freq
    theta = n * t
    rot = np.array([[math.cos(theta), -math.sin(theta)],
                    [math.sin(theta), math.cos(theta)]])
    pos = base @ rot.T
    vel = n * np.stack([-pos[:, 1], pos[:, 0]], axis=1)
    if dim == 4:
        means = np.hstack([pos, vel])
        var = np.array([position_var, position_var, velocity_var, velocity_var])
    elif dim == 6:
        zeros = np.zeros((n_points, 1))
        means = np.hstack([pos, zeros, vel, zeros])
        var = np.array([position_var] * 3 + [velocity_var] * 3)
    else:
        raise ValueError("dim must be 4 or 6")
    cov = np.diag(var)
    comps = [GaussianComponent(1.0, m, cov) for m in means]
    return GaussianMixture(comps, dim=dim)


def nearest_target_distances(means: np.ndarray, target_means: np.ndarray, n_pos: int) -> np.ndarray:
    """Distance from each mean's position block to the closest target."""
    p = np.atleast_2d(means)[:, :n_pos]
    q = np.atleast_2d(target_means)[:, :n_pos]
    d = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=2)
    return d.min(axis=1)


# ---------------------------------------------------------------------------
# Measurement generation.
# ---------------------------------------------------------------------------


def generate_measurements(agents, sensor: SensorModel, rng: np.random.Generator):
    """Detections plus clutter for one scan, in shuffled order.

    Each live agent is detected independently with probability p_detect,
    producing z = H x + noise with covariance r_meas.  A Poisson number
    of clutter points lands uniformly in the observation window.  The
    returned list is shuffled because measurement origins are unknown to
    the filter.

    Args:
        agents: Sequence of Agent (only used for their states) or an
            (n, n_x) array of live-agent states.
        sensor: Detection/noise/clutter parameters.
        rng: Seeded generator; draw order is fixed for reproducibility.
    """
    if isinstance(agents, np.ndarray):
        states = np.atleast_2d(agents) if agents.size else agents.reshape(0, sensor.h_mat.shape[1])
    else:
        states = np.array([a.state for a in agents]).reshape(-1, sensor.h_mat.shape[1])
    chol_r = np.linalg.cholesky(sensor.r_meas)
    out = []
    for x in states:
        if rng.random() < sensor.p_detect:
            noise = chol_r @ rng.standard_normal(sensor.n_z)
            out.append(sensor.h_mat @ x + noise)
    n_clutter = rng.poisson(sensor.clutter_rate) if sensor.clutter_rate > 0 else 0
    lo, hi = sensor.window[:, 0], sensor.window[:, 1]
    for _ in range(n_clutter):
        out.append(rng.uniform(lo, hi))
    if len(out) > 1:
        order = rng.permutation(len(out))
        out = [out[i] for i in order]
    return out


# ---------------------------------------------------------------------------
# Scenario definition and validation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Declarative experiment description (JSON schema version 1)."""

    name: str
    seed: int
    model: dict
    horizon_steps: int
    initial: dict
    targets: dict
    distance: dict
    controller: dict
    estimation: dict
    agents_per_component: int = 10
    snapshot_times: tuple = ()
    schema: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        errors = validate_scenario_dict(data)
        if errors:
            field_name, message = errors[0]
            raise ScenarioError(field_name, message)
        return cls(
            name=data["name"],
            seed=int(data["seed"]),
            model=dict(data["model"]),
            horizon_steps=int(data["horizon_steps"]),
            initial=dict(data["initial"]),
            targets=dict(data["targets"]),
            distance=dict(data["distance"]),
            controller=dict(data["controller"]),
            estimation=dict(data["estimation"]),
            agents_per_component=int(data.get("agents_per_component", 10)),
            snapshot_times=tuple(data.get("snapshot_times", ())),
            schema=int(data.get("schema", 1)),
        )

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "name": self.name,
            "seed": self.seed,
            "model": dict(self.model),
            "horizon_steps": self.horizon_steps,
            "initial": dict(self.initial),
            "targets": dict(self.targets),
            "distance": dict(self.distance),
            "controller": dict(self.controller),
            "estimation": dict(self.estimation),
            "agents_per_component": self.agents_per_component,
            "snapshot_times": list(self.snapshot_times),
        }

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_path(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))

    def with_controller_kind(self, kind: str) -> "Scenario":
        ctrl = dict(self.controller)
        ctrl["kind"] = kind
        return replace(self, controller=ctrl, name=f"{self.name}#{kind}")

    @property
    def dt(self) -> float:
        return float(self.model["dt"])

    @property
    def state_dim(self) -> int:
        return 6 if self.model["kind"] == "cwh" else 4

    @property
    def n_pos(self) -> int:
        return self.state_dim // 2


def _check(errors, cond, field_name, message):
    if not cond:
        errors.append((field_name, message))
    return bool(cond)


def validate_scenario_dict(data: dict) -> list[tuple[str, str]]:
    """Schema and dimensional-consistency checks without running.

    Returns a list of (field, message) pairs; empty when valid.
    """
    errors: list[tuple[str, str]] = []
    if not isinstance(data, dict):
        return [("scenario", "must be a JSON object")]
    if not _check(errors, int(data.get("schema", 1)) == 1, "schema", "unsupported schema version"):
        return errors
    for key in ("name", "seed", "model", "horizon_steps", "initial", "targets",
                "distance", "controller", "estimation"):
        if key not in data:
            errors.append((key, "missing required field"))
    if errors:
        return errors

    model = data["model"]
    kind_ok = _check(errors, model.get("kind") in _MODEL_KINDS, "model.kind",
                     f"must be one of {_MODEL_KINDS}")
    if "dt" not in model:
        errors.append(("model.dt", "missing required field"))
    elif not (isinstance(model["dt"], (int, float)) and model["dt"] > 0):
        errors.append(("model.dt", "must be a positive number"))
    if kind_ok and model["kind"].startswith("cwh"):
        if not (isinstance(model.get("n_freq"), (int, float)) and model["n_freq"] > 0):
            errors.append(("model.n_freq", "must be a positive number for relative-motion models"))
    if "q_proc" in model and not (isinstance(model["q_proc"], (int, float)) and model["q_proc"] >= 0):
        errors.append(("model.q_proc", "must be a nonnegative number"))
    if model.get("cost_covariance", "propagate") not in ("propagate", "hold"):
        errors.append(("model.cost_covariance", "must be 'propagate' or 'hold'"))

    if not (isinstance(data["horizon_steps"], int) and data["horizon_steps"] >= 1):
        errors.append(("horizon_steps", "must be an integer >= 1"))

    n_pos = 3 if model.get("kind") == "cwh" else 2
    n_x = 2 * n_pos

    init = data["initial"]
    has_pos = "positions" in init
    has_uniform = "uniform_positions" in init
    if not _check(errors, has_pos != has_uniform, "initial",
                  "exactly one of positions / uniform_positions is required"):
        return errors
    n_comp = 0
    if has_pos:
        pos = init["positions"]
        if not (isinstance(pos, list) and len(pos) >= 1
                and all(isinstance(p, list) and len(p) == n_pos for p in pos)):
            errors.append(("initial.positions", f"must be a non-empty list of length-{n_pos} vectors"))
        else:
            n_comp = len(pos)
    else:
        uni = init["uniform_positions"]
        ok = (isinstance(uni, dict) and isinstance(uni.get("count"), int) and uni["count"] >= 1
              and isinstance(uni.get("low"), (int, float)) and isinstance(uni.get("high"), (int, float))
              and uni["low"] < uni["high"])
        if not ok:
            errors.append(("initial.uniform_positions", "needs count >= 1 and low < high"))
        else:
            n_comp = uni["count"]
    for key in ("position_std", "velocity_std"):
        if not (isinstance(init.get(key), (int, float)) and init[key] > 0):
            errors.append((f"initial.{key}", "must be a positive number"))
    if "weights" in init:
        w = init["weights"]
        if not (isinstance(w, list) and len(w) == n_comp
                and all(isinstance(v, (int, float)) and v >= 0 for v in w)):
            errors.append(("initial.weights", "must be nonnegative and match the component count"))
    if "covariances" in init:
        covs = init["covariances"]
        if not (isinstance(covs, list) and len(covs) == n_comp):
            errors.append(("initial.covariances", "must list one matrix per component"))
        else:
            for i, c in enumerate(covs):
                arr = np.asarray(c, dtype=float)
                if arr.shape != (n_x, n_x):
                    errors.append((f"initial.covariances[{i}]", f"must be {n_x}x{n_x}"))
                    continue
                try:
                    np.linalg.cholesky(arr)
                except np.linalg.LinAlgError:
                    errors.append((f"initial.covariances[{i}]", "must be symmetric positive definite"))

    targets = data["targets"]
    tkind = targets.get("kind", "static")
    if tkind == "static":
        pos = targets.get("positions")
        if not (isinstance(pos, list) and len(pos) >= 1
                and all(isinstance(p, list) and len(p) == n_pos for p in pos)):
            errors.append(("targets.positions", f"must be a non-empty list of length-{n_pos} vectors"))
    elif tkind == "rotating_star":
        if not (isinstance(targets.get("n_points"), int) and targets["n_points"] >= 1):
            errors.append(("targets.n_points", "must be an integer >= 1"))
        outer = targets.get("outer_radius", 1.0)
        inner = targets.get("inner_radius", 0.382)
        if not (isinstance(outer, (int, float)) and isinstance(inner, (int, float))
                and 0 < inner < outer):
            errors.append(("targets.inner_radius", "need 0 < inner_radius < outer_radius"))
        if model.get("kind") == "double_integrator":
            errors.append(("targets.kind", "rotating_star needs a relative-motion model"))
    else:
        errors.append(("targets.kind", "must be 'static' or 'rotating_star'"))

    dist = data["distance"]
    if dist.get("kind") not in _DISTANCE_KINDS:
        errors.append(("distance.kind", f"must be one of {_DISTANCE_KINDS}"))
    if "alpha" in dist and not (isinstance(dist["alpha"], (int, float)) and dist["alpha"] >= 0):
        errors.append(("distance.alpha", "must be a nonnegative number"))

    ctrl = data["controller"]
    if ctrl.get("kind") not in ("ilqr", "mpc"):
        errors.append(("controller.kind", "must be 'ilqr' or 'mpc'"))
    if not (isinstance(ctrl.get("control_weight"), (int, float)) and ctrl["control_weight"] > 0):
        errors.append(("controller.control_weight", "must be a positive number"))
    t_p = ctrl.get("t_p", 3)
    t_c = ctrl.get("t_c", 1)
    if ctrl.get("kind") == "mpc":
        if not (isinstance(t_p, int) and t_p >= 1):
            errors.append(("controller.t_p", "must be an integer >= 1"))
        elif not (isinstance(t_c, int) and 1 <= t_c <= t_p):
            errors.append(("controller.t_c", "must satisfy 1 <= t_c <= t_p"))

    est = data["estimation"]
    mode = est.get("mode")
    if mode not in ("perfect", "gmphd"):
        errors.append(("estimation.mode", "must be 'perfect' or 'gmphd'"))
    elif mode == "gmphd":
        for key, lo, hi in (("p_detect", 0.0, 1.0), ("p_survive", 0.0, 1.0)):
            val = est.get(key)
            if not (isinstance(val, (int, float)) and lo <= val <= hi):
                errors.append((f"estimation.{key}", f"must be a number in [{lo}, {hi}]"))
        if not (isinstance(est.get("clutter_rate"), (int, float)) and est["clutter_rate"] >= 0):
            errors.append(("estimation.clutter_rate", "must be a nonnegative number"))
        if not (isinstance(est.get("meas_noise_var"), (int, float)) and est["meas_noise_var"] > 0):
            errors.append(("estimation.meas_noise_var", "must be a positive number"))
        window = est.get("window")
        if not (isinstance(window, list) and len(window) == 2
                and all(isinstance(side, list) and len(side) == 2 and side[0] < side[1]
                        for side in window)):
            errors.append(("estimation.window", "must be two [low, high] pairs"))
        birth = est.get("birth", {})
        if not (isinstance(birth.get("mass"), (int, float)) and birth["mass"] > 0):
            errors.append(("estimation.birth.mass", "must be a positive number"))
        sched = est.get("schedule", {})
        for part in ("births", "deaths"):
            entries = sched.get(part, {})
            if not isinstance(entries, dict) or not all(
                str(k).lstrip("-").isdigit() and isinstance(v, int) and v >= 0
                for k, v in entries.items()
            ):
                errors.append((f"estimation.schedule.{part}", "must map step -> nonnegative count"))

    if not isinstance(data.get("seed", 0), int):
        errors.append(("seed", "must be an integer"))
    apc = data.get("agents_per_component", 10)
    if not (isinstance(apc, int) and apc >= 1):
        errors.append(("agents_per_component", "must be an integer >= 1"))
    return errors


# ---------------------------------------------------------------------------
# Scenario building blocks.
# ---------------------------------------------------------------------------


def _build_model(scenario: Scenario) -> LinearModel:
    kind = scenario.model["kind"]
    if kind == "double_integrator":
        cont = double_integrator()
    else:
        orbit = OrbitParams.from_mean_motion(float(scenario.model["n_freq"]))
        cont = cwh_planar_model(orbit) if kind == "cwh_planar" else cwh_model(orbit)
    q = float(scenario.model.get("q_proc", 1e-6))
    return discretize_zoh(cont, scenario.dt, q_proc=q)


def _component_cov(scenario: Scenario, section: dict) -> np.ndarray:
    n_pos = scenario.n_pos
    pos_std = float(section.get("position_std", scenario.initial["position_std"]))
    vel_std = float(section.get("velocity_std", scenario.initial["velocity_std"]))
    return np.diag([pos_std**2] * n_pos + [vel_std**2] * n_pos)


def _initial_arrays(scenario: Scenario, rng: np.random.Generator):
    """Initial weights/means/covs; draws uniform positions when requested."""
    init = scenario.initial
    n_pos = scenario.n_pos
    if "positions" in init:
        pos = np.asarray(init["positions"], dtype=float)
    else:
        uni = init["uniform_positions"]
        pos = rng.uniform(float(uni["low"]), float(uni["high"]), (int(uni["count"]), n_pos))
    n_comp = pos.shape[0]
    means = np.hstack([pos, np.zeros((n_comp, n_pos))])
    if "covariances" in init:
        covs = np.asarray(init["covariances"], dtype=float)
    else:
        covs = np.repeat(_component_cov(scenario, init)[None, :, :], n_comp, axis=0)
    weights = np.asarray(init.get("weights", np.ones(n_comp)), dtype=float)
    return weights, means, covs


def _target_provider(scenario: Scenario):
    """Returns (target_at, n_targets); target_at(k) is cached per step."""
    targets = scenario.targets
    dim = scenario.state_dim
    cache: dict[int, GaussianMixture] = {}
    if targets.get("kind", "static") == "static":
        pos = np.asarray(targets["positions"], dtype=float)
        n_t = pos.shape[0]
        means = np.hstack([pos, np.zeros((n_t, scenario.n_pos))])
        cov = _component_cov(scenario, targets)
        weights = np.asarray(targets.get("weights", np.ones(n_t)), dtype=float)
        mix = GaussianMixture.from_arrays(weights, means, np.repeat(cov[None], n_t, axis=0))

        def target_at(k: int) -> GaussianMixture:
            return mix

        return target_at, n_t

    geometry = StarGeometry(
        outer_radius=float(targets.get("outer_radius", 1.0)),
        inner_radius=float(targets.get("inner_radius", 0.382)),
    )
    n_t = int(targets["n_points"])
    orbit = OrbitParams.from_mean_motion(float(scenario.model["n_freq"]))
    cov = _component_cov(scenario, targets)
    pos_var = float(cov[0, 0])
    vel_var = float(cov[scenario.n_pos, scenario.n_pos])

    def target_at(k: int) -> GaussianMixture:
        if k not in cache:
            cache[k] = rotating_star_targets(
                n_t, k * scenario.dt, orbit, geometry,
                position_var=pos_var, velocity_var=vel_var, dim=dim,
            )
        return cache[k]

    return target_at, n_t


@dataclass
class ControlSetup:
    """Everything the mean-level controllers need, built from a scenario."""

    model: LinearModel
    dynamics: StackedDynamics
    x0: np.ndarray
    weights: np.ndarray
    covs0: np.ndarray
    cov_schedule: np.ndarray
    target_at: object
    n_targets: int
    r_weight: np.ndarray
    kind: DistanceKind
    mpc_config: MpcConfig
    ilqr_options: IlqrOptions
    n_steps: int


def _cov_schedule(model: LinearModel, covs0: np.ndarray, n_steps: int,
                  mode: str = "propagate") -> np.ndarray:
    """Covariance schedule entering the stage costs; precomputed once.

    "propagate" runs A P A' + Q forward (control-free).  "hold" keeps
    the initial covariances: propagation builds position-velocity
    correlation (dt * velocity variance in the off-diagonal), and when
    the velocity spread is deliberately wide the correlated quadratic
    rewards velocities pointing away from the targets, which defeats
    short-horizon controllers.  Wide-velocity scenarios hold the
    schedule fixed instead.
    """
    n_comp = covs0.shape[0]
    out = np.empty((n_steps + 1, n_comp, covs0.shape[1], covs0.shape[2]))
    out[0] = covs0
    if mode == "hold":
        out[1:] = covs0[None]
        return out
    for k in range(n_steps):
        for i in range(n_comp):
            out[k + 1, i] = propagate_covariance(model, out[k, i])
    return out


def control_setup(scenario: Scenario, rng: np.random.Generator | None = None) -> ControlSetup:
    """Assemble the mean-level control problem a scenario describes."""
    rng = rng or np.random.default_rng(scenario.seed)
    model = _build_model(scenario)
    weights, means, covs = _initial_arrays(scenario, rng)
    n_comp = means.shape[0]
    dyn = StackedDynamics(model.a_disc, model.b_disc, n_comp)
    target_at, n_targets = _target_provider(scenario)
    kind = DistanceKind.from_dict(scenario.distance)
    ctrl = scenario.controller
    r_weight = float(ctrl["control_weight"]) * np.eye(dyn.n_inputs)
    mpc_config = MpcConfig(
        t_p=int(ctrl.get("t_p", 3)),
        t_c=int(ctrl.get("t_c", 1)),
        qn_opts=QnOptions(
            grad_tol=float(ctrl.get("grad_tol", 1e-9)),
            max_fevals=int(ctrl.get("max_fevals", 400)),
        ),
    )
    ilqr_options = IlqrOptions(
        max_iters=int(ctrl.get("max_iters", 100)),
        tol=float(ctrl.get("tol", 1e-7)),
    )
    n_steps = scenario.horizon_steps
    cov_mode = scenario.model.get("cost_covariance", "propagate")
    return ControlSetup(
        model=model,
        dynamics=dyn,
        x0=means.reshape(-1),
        weights=weights,
        covs0=covs,
        cov_schedule=_cov_schedule(model, covs, n_steps, cov_mode),
        target_at=target_at,
        n_targets=n_targets,
        r_weight=r_weight,
        kind=kind,
        mpc_config=mpc_config,
        ilqr_options=ilqr_options,
        n_steps=n_steps,
    )


# ---------------------------------------------------------------------------
# Simulation log.
# ---------------------------------------------------------------------------


@dataclass
class SimLog:
    """Time-indexed record of one scenario run.

    Intensity entries have horizon + 1 steps; controls, measurements,
    estimates, and per-step costs have horizon entries.  Wall-clock
    figures are kept out of the deterministic exports (they land in
    diagnostics only).
    """

    scenario_name: str
    seed: int
    dt: float
    controller_kind: str
    estimation_mode: str
    times: np.ndarray
    intensity_weights: list
    intensity_means: list
    intensity_covs: list
    target_means: list
    agent_states: np.ndarray
    agent_alive: np.ndarray
    controls: list
    measurements: list
    estimates: list
    cardinality_true: np.ndarray
    cardinality_est: np.ndarray | None
    step_costs: np.ndarray
    controller_records: tuple
    wallclock_ms: dict

    @property
    def n_steps(self) -> int:
        return len(self.step_costs)

    def export_dict(self) -> dict:
        """Deterministic view of the run (timings excluded)."""
        return {
            "scenario": self.scenario_name,
            "seed": self.seed,
            "dt": self.dt,
            "controller": self.controller_kind,
            "estimation": self.estimation_mode,
            "times": self.times.tolist(),
            "intensity_weights": [np.asarray(w).tolist() for w in self.intensity_weights],
            "intensity_means": [np.asarray(m).tolist() for m in self.intensity_means],
            "target_means": [np.asarray(t).tolist() for t in self.target_means],
            # Dead/unborn agents carry NaN placeholders internally; export
            # them as None (valid JSON, and NaN != NaN would defeat
            # equality checks on replayed logs).
            "agent_states": [
                [self.agent_states[k, i].tolist() if self.agent_alive[k, i] else None
                 for i in range(self.agent_states.shape[1])]
                for k in range(self.agent_states.shape[0])
            ],
            "agent_alive": self.agent_alive.tolist(),
            "controls": [np.asarray(u).tolist() for u in self.controls],
            "measurements": [np.asarray(z).tolist() if len(z) else [] for z in self.measurements],
            "estimates": [[np.asarray(e).tolist() for e in step] for step in self.estimates],
            "cardinality_true": self.cardinality_true.tolist(),
            "cardinality_est": None if self.cardinality_est is None else self.cardinality_est.tolist(),
            "step_costs": self.step_costs.tolist(),
        }


# ---------------------------------------------------------------------------
# Scenario execution.
# ---------------------------------------------------------------------------


def _spawn_agents(rng, means, covs, per_component, vel_std, start_id=0, birth_step=0):
    """Sample agents around the component means.

    Positions follow the component spread; velocities use the physical
    spread ``vel_std`` rather than the component covariance, whose wide
    velocity entries are cost shaping, not an initial-velocity
    distribution.
    """
    agents = []
    next_id = start_id
    n_x = means.shape[1]
    n_pos = n_x // 2
    for i in range(means.shape[0]):
        sample_cov = covs[i].copy()
        sample_cov[n_pos:, :] = 0.0
        sample_cov[:, n_pos:] = 0.0
        sample_cov[n_pos:, n_pos:] = vel_std**2 * np.eye(n_pos)
        chol = np.linalg.cholesky(sample_cov)
        for _ in range(per_component):
            state = means[i] + chol @ rng.standard_normal(n_x)
            agents.append(Agent(id=next_id, state=state, birth_step=birth_step))
            next_id += 1
    return agents


def _distance_value(setup: ControlSetup, means_flat: np.ndarray, covs: np.ndarray, k: int) -> float:
    target = setup.target_at(k)
    val, _, _ = mixture_distance(
        setup.kind, setup.weights, means_flat.reshape(len(setup.weights), -1), covs,
        target.weights, target.means, target.covs, order=0,
    )
    return val


def _plan_ilqr(setup: ControlSetup):
    n = setup.n_steps
    held = bool(np.all(setup.cov_schedule == setup.cov_schedule[0]))
    if held:
        traj = MixtureTrajectoryCost(
            setup.r_weight, setup.kind, setup.weights, setup.cov_schedule[0],
            [setup.target_at(k) for k in range(n + 1)], horizon=n,
        )
        problem = IlqrProblem(
            model=setup.model, n_copies=len(setup.weights), horizon=n,
            x0=setup.x0, trajectory_cost=traj,
        )
    else:
        stage_costs = [
            MixtureStageCost(setup.r_weight, setup.kind, setup.weights,
                             setup.cov_schedule[k], setup.target_at(k))
            for k in range(n)
        ]
        terminal = MixtureTerminalCost(setup.kind, setup.weights,
                                       setup.cov_schedule[n], setup.target_at(n))
        problem = IlqrProblem(
            model=setup.model, n_copies=len(setup.weights), horizon=n,
            x0=setup.x0, stage_costs=stage_costs, terminal_cost=terminal,
        )
    solution = ilqr_solve(problem, setup.ilqr_options)
    records = tuple(solution.diagnostics) + (
        {"iterations": solution.iterations, "converged": solution.converged,
         "final_cost": solution.cost},
    )
    return solution.states, solution.controls, records


def run_scenario(scenario: Scenario) -> SimLog:
    """Execute a scenario end to end and log everything.

    Perfect mode plans once (or recedes) over the intensity statistics,
    then applies each component's control to its assigned agents through
    their own noisy dynamics.  GM-PHD mode closes the loop through
    measurements and the filter; see _run_gmphd.
    """
    if scenario.estimation.get("mode", "perfect") == "gmphd":
        return _run_gmphd(scenario)
    t_total = time.perf_counter()
    rng = np.random.default_rng(scenario.seed)
    setup = control_setup(scenario, rng)
    n, dt = setup.n_steps, scenario.dt
    n_comp = len(setup.weights)
    n_x = setup.dynamics.n_x
    n_u = setup.dynamics.n_u

    agent_vel_std = float(scenario.initial.get("agent_velocity_std", 0.01))
    agents = _spawn_agents(rng, setup.x0.reshape(n_comp, n_x), setup.covs0,
                           scenario.agents_per_component, agent_vel_std)
    n_agents = len(agents)

    t_ctrl = time.perf_counter()
    if scenario.controller["kind"] == "ilqr":
        states, controls, records = _plan_ilqr(setup)
    else:
        plan = plan_receding(
            dynamics=setup.dynamics, x0=setup.x0, comp_weights=setup.weights,
            cov_schedule=setup.cov_schedule, target_at=setup.target_at,
            r_weight=setup.r_weight, kind=setup.kind, config=setup.mpc_config,
            n_steps=n,
        )
        states, controls, records = plan.states, plan.controls, plan.records
    ctrl_ms = 1e3 * (time.perf_counter() - t_ctrl)

    agent_states = np.zeros((n + 1, n_agents, n_x))
    agent_alive = np.ones((n + 1, n_agents), dtype=bool)
    step_costs = np.zeros(n)
    chol_q = np.linalg.cholesky(setup.model.q_proc)
    for idx, agent in enumerate(agents):
        agent_states[0, idx] = agent.state
    a_d, b_d = setup.model.a_disc, setup.model.b_disc

    for k in range(n):
        means_k = states[k].reshape(n_comp, n_x)
        assign = mahalanobis_assign(agent_states[k], means_k, setup.cov_schedule[k])
        u_k = controls[k].reshape(n_comp, n_u)
        for idx in range(n_agents):
            noise = chol_q @ rng.standard_normal(n_x)
            agent_states[k + 1, idx] = a_d @ agent_states[k, idx] + b_d @ u_k[assign[idx]] + noise
        step_costs[k] = (
            _distance_value(setup, states[k], setup.cov_schedule[k], k)
            + float(controls[k] @ setup.r_weight @ controls[k])
        )

    times = np.arange(n + 1) * dt
    total_ms = 1e3 * (time.perf_counter() - t_total)
    return SimLog(
        scenario_name=scenario.name,
        seed=scenario.seed,
        dt=dt,
        controller_kind=scenario.controller["kind"],
        estimation_mode="perfect",
        times=times,
        intensity_weights=[setup.weights.copy() for _ in range(n + 1)],
        intensity_means=[states[k].reshape(n_comp, n_x).copy() for k in range(n + 1)],
        intensity_covs=[setup.cov_schedule[k].copy() for k in range(n + 1)],
        target_means=[setup.target_at(k).means for k in range(n + 1)],
        agent_states=agent_states,
        agent_alive=agent_alive,
        controls=[controls[k].reshape(n_comp, n_u).copy() for k in range(n)],
        measurements=[np.zeros((0, scenario.n_pos)) for _ in range(n)],
        estimates=[[] for _ in range(n)],
        cardinality_true=np.full(n + 1, float(n_agents)),
        cardinality_est=None,
        step_costs=step_costs,
        controller_records=tuple(records),
        wallclock_ms={"controller": ctrl_ms, "total": total_ms},
    )


def _gmphd_pieces(scenario: Scenario, model: LinearModel):
    est = scenario.estimation
    n_x = scenario.state_dim
    n_pos = scenario.n_pos
    h_mat = np.zeros((n_pos, n_x))
    h_mat[:n_pos, :n_pos] = np.eye(n_pos)
    sensor = SensorModel(
        p_detect=float(est["p_detect"]),
        h_mat=h_mat,
        r_meas=float(est["meas_noise_var"]) * np.eye(n_pos),
        clutter_rate=float(est["clutter_rate"]),
        window=np.asarray(est["window"], dtype=float),
    )
    birth_cfg = est.get("birth", {})
    pos_std = float(birth_cfg.get("position_std", 1.0))
    vel_std = float(birth_cfg.get("velocity_std", 0.1))
    birth_cov = np.diag([pos_std**2] * n_pos + [vel_std**2] * n_pos)
    birth = GaussianMixture(
        [GaussianComponent(float(birth_cfg.get("mass", 0.2)), np.zeros(n_x), birth_cov)],
        dim=n_x,
    )
    # The filter may assume more process noise than the plant truly has:
    # inflating q lets velocity estimates corrupted by a wrong
    # association wash out in a few scans instead of sticking.
    filter_model = model
    if "filter_q_proc" in est:
        filter_model = replace(model, q_proc=float(est["filter_q_proc"]) * np.eye(n_x))
    phd = PhdModel(p_survive=float(est.get("p_survive", 0.99)), birth=birth,
                   motion=filter_model)
    prune_cfg = est.get("prune", {})
    prune = PruneParams(
        trunc_thresh=float(prune_cfg.get("trunc_thresh", 1e-5)),
        merge_dist=float(prune_cfg.get("merge_dist", 4.0)),
        max_components=int(prune_cfg.get("max_components", 300)),
    )
    return sensor, phd, prune


def _run_gmphd(scenario: Scenario) -> SimLog:
    """Closed-loop run: measure, filter, plan on estimates, actuate.

    Per step: scheduled births/deaths update the true swarm; a scan is
    generated; the filter predicts with the controls issued last step
    (matched to surviving components by index, zero for births) and
    updates; a short-horizon solve over the confirmed components yields
    fresh controls; each live agent then applies the control of its
    closest planned component.  Controller failures leave that step
    uncontrolled rather than aborting the run.
    """
    t_total = time.perf_counter()
    rng = np.random.default_rng(scenario.seed)
    model = _build_model(scenario)
    n = scenario.horizon_steps
    dt = scenario.dt
    n_x, n_u = model.n_states, model.n_inputs
    n_pos = scenario.n_pos
    kind = DistanceKind.from_dict(scenario.distance)
    ctrl = scenario.controller
    replan_horizon = int(ctrl.get("replan_horizon", 4))
    replan_iters = int(ctrl.get("replan_iters", 6))
    plan_weight_min = float(scenario.estimation.get("plan_weight_min", 0.5))
    target_at, _ = _target_provider(scenario)
    sensor, phd, prune = _gmphd_pieces(scenario, model)
    cost_cov = _component_cov(scenario, scenario.initial)
    assign_gate = float(scenario.estimation.get(
        "assign_gate", 3.0 * math.sqrt(cost_cov[0, 0])))
    # Actuation limit: the planner is unconstrained, but the applied
    # thrust saturates.  This bounds the damage a transient bad velocity
    # estimate can do to the real agents (and the same clip enters the
    # filter prediction, keeping the loop consistent).
    u_max = ctrl.get("u_max")
    u_max = float(u_max) if u_max is not None else None
    # Scaling the controlled side's weights in the stage cost weakens
    # the intensity self-repulsion (weight squared) relative to the
    # target attraction (weight linear), which keeps a filled formation
    # from walling out late arrivals.
    cost_weight_scale = float(ctrl.get("cost_weight_scale", 1.0))

    sched = scenario.estimation.get("schedule", {})
    births = {int(k): int(v) for k, v in sched.get("births", {}).items()}
    deaths = {int(k): int(v) for k, v in sched.get("deaths", {}).items()}
    if not births:
        births = {0: int(scenario.initial.get("uniform_positions", {}).get("count", 0))}

    init = scenario.initial
    uni = init.get("uniform_positions", {"low": -1.0, "high": 1.0})
    lo, hi = float(uni["low"]), float(uni["high"])

    def spawn(count, step):
        out = []
        for _ in range(count):
            pos = rng.uniform(lo, hi, n_pos)
            state = np.concatenate([pos, np.zeros(n_pos)])
            out.append(Agent(id=-1, state=state, birth_step=step))
        return out

    max_agents = sum(births.values())
    agents: list[Agent] = []
    agent_states = np.full((n + 1, max_agents, n_x), np.nan)
    agent_alive = np.zeros((n + 1, max_agents), dtype=bool)

    filter_mix = GaussianMixture([], dim=n_x)
    prev_controls: np.ndarray | None = None  # aligned with filter_mix components
    chol_q = np.linalg.cholesky(model.q_proc)
    a_d, b_d = model.a_disc, model.b_disc
    r_stage = float(ctrl["control_weight"])

    log_means, log_weights, log_covs, log_targets = [], [], [], []
    measurements_log, estimates_log, controls_log = [], [], []
    card_true = np.zeros(n + 1)
    card_est = np.zeros(n)
    step_costs = np.zeros(n)
    records = []
    filter_ms = 0.0
    ctrl_ms = 0.0

    for k in range(n):
        # Scheduled births and deaths take effect before the scan.
        for agent in spawn(births.get(k, 0), k):
            agent.id = len(agents)
            agents.append(agent)
        if k in deaths:
            doomed = [a for a in agents if a.alive_at(k)][: deaths[k]]
            for a in doomed:
                a.death_step = k
        live = [a for a in agents if a.alive_at(k)]
        card_true[k] = len(live)
        for a in agents:
            if a.alive_at(k):
                agent_states[k, a.id] = a.state
                agent_alive[k, a.id] = True

        scan = generate_measurements(np.array([a.state for a in live]), sensor, rng)
        measurements_log.append(np.array(scan).reshape(len(scan), n_pos))

        t_f = time.perf_counter()
        pred = phd_predict(filter_mix, phd, controls=prev_controls)
        upd = phd_update(pred, scan, sensor)
        filter_mix = prune_merge(upd, prune)
        filter_ms += 1e3 * (time.perf_counter() - t_f)

        cardinality, est_states = estimate_states(filter_mix)
        card_est[k] = cardinality
        estimates_log.append(est_states)

        # Plan over the confirmed components with a short-horizon solve.
        # The distance cost uses the configured shaping covariance, not
        # the filter posteriors: estimation uncertainty is much tighter
        # than the intended interaction ranges and would make the
        # repulsion terms needle-sharp.
        plan_idx = [i for i, c in enumerate(filter_mix.components)
                    if c.weight >= plan_weight_min]
        controls_full = np.zeros((len(filter_mix), n_u))
        t_c = time.perf_counter()
        if plan_idx:
            sel_w = cost_weight_scale * np.array(
                [filter_mix.components[i].weight for i in plan_idx])
            sel_m = np.array([filter_mix.components[i].mean for i in plan_idx])
            horizon = min(replan_horizon, max(1, n - k))
            shaping = np.repeat(cost_cov[None], len(plan_idx), axis=0)
            cov_mode = scenario.model.get("cost_covariance", "propagate")
            targets = [target_at(min(k + j, n)) for j in range(horizon + 1)]
            if cov_mode == "hold":
                traj = MixtureTrajectoryCost(
                    r_stage * np.eye(len(plan_idx) * n_u), kind, sel_w, shaping,
                    targets, horizon=horizon,
                )
                problem = IlqrProblem(
                    model=model, n_copies=len(plan_idx), horizon=horizon,
                    x0=sel_m.reshape(-1), trajectory_cost=traj,
                )
            else:
                sched_cov = _cov_schedule(model, shaping, horizon, cov_mode)
                stage_costs = [
                    MixtureStageCost(r_stage * np.eye(len(plan_idx) * n_u), kind, sel_w,
                                     sched_cov[j], targets[j])
                    for j in range(horizon)
                ]
                terminal = MixtureTerminalCost(kind, sel_w, sched_cov[horizon],
                                               targets[horizon])
                problem = IlqrProblem(
                    model=model, n_copies=len(plan_idx), horizon=horizon,
                    x0=sel_m.reshape(-1), stage_costs=stage_costs, terminal_cost=terminal,
                )
            # Each replan starts cold: component identities drift as the
            # filter merges and births, so inheriting a shifted previous
            # plan feeds mismatched controls that the regularized solver
            # then stays close to.
            try:
                solution = ilqr_solve(problem, IlqrOptions(max_iters=replan_iters, tol=1e-5))
                u_sel = solution.controls[0].reshape(len(plan_idx), n_u)
                if u_max is not None:
                    u_sel = np.clip(u_sel, -u_max, u_max)
                controls_full[plan_idx] = u_sel
                records.append({"step": k, "n_planned": len(plan_idx),
                                "iterations": solution.iterations,
                                "cost": solution.cost})
            except Exception as exc:  # keep simulating with zero control
                records.append({"step": k, "n_planned": len(plan_idx),
                                "error": repr(exc)})
        ctrl_ms += 1e3 * (time.perf_counter() - t_c)
        prev_controls = controls_full
        controls_log.append(controls_full)

        log_weights.append(filter_mix.weights)
        log_means.append(filter_mix.means)
        log_covs.append(filter_mix.covs)
        log_targets.append(target_at(k).means)

        # Actuate the true agents with their closest planned component.
        # A position gate keeps agents the filter has not locally
        # resolved un-actuated: applying a distant component's control
        # to an agent it does not represent launches the agent instead
        # of steering it.
        if plan_idx and live:
            live_states = np.array([a.state for a in live])
            sel_m = np.array([filter_mix.components[i].mean for i in plan_idx])
            sel_p = np.array([filter_mix.components[i].cov for i in plan_idx])
            assign = mahalanobis_assign(live_states, sel_m, sel_p)
            gate_dist = np.linalg.norm(
                live_states[:, :n_pos] - sel_m[assign][:, :n_pos], axis=1)
            gated = gate_dist <= assign_gate
        else:
            assign = None
        target_k = target_at(k)
        if len(filter_mix):
            val, _, _ = mixture_distance(
                kind, filter_mix.weights, filter_mix.means, filter_mix.covs,
                target_k.weights, target_k.means, target_k.covs, order=0,
            )
            step_costs[k] = val + r_stage * float(controls_full.ravel() @ controls_full.ravel())
        for j, a in enumerate(live):
            if assign is not None and gated[j]:
                u = controls_full[plan_idx[assign[j]]]
            else:
                u = np.zeros(n_u)
            noise = chol_q @ rng.standard_normal(n_x)
            a.state = a_d @ a.state + b_d @ u + noise

    # Final snapshot.
    live = [a for a in agents if a.alive_at(n)]
    card_true[n] = len(live)
    for a in agents:
        if a.alive_at(n):
            agent_states[n, a.id] = a.state
            agent_alive[n, a.id] = True
    log_weights.append(filter_mix.weights)
    log_means.append(filter_mix.means)
    log_covs.append(filter_mix.covs)
    log_targets.append(target_at(n).means)

    total_ms = 1e3 * (time.perf_counter() - t_total)
    return SimLog(
        scenario_name=scenario.name,
        seed=scenario.seed,
        dt=dt,
        controller_kind=scenario.controller["kind"],
        estimation_mode="gmphd",
        times=np.arange(n + 1) * dt,
        intensity_weights=log_weights,
        intensity_means=log_means,
        intensity_covs=log_covs,
        target_means=log_targets,
        agent_states=agent_states,
        agent_alive=agent_alive,
        controls=controls_log,
        measurements=measurements_log,
        estimates=estimates_log,
        cardinality_true=card_true,
        cardinality_est=card_est,
        step_costs=step_costs,
        controller_records=tuple(records),
        wallclock_ms={"controller": ctrl_ms, "filter": filter_ms, "total": total_ms},
    )


# ---------------------------------------------------------------------------
# Bundled scenarios.
# ---------------------------------------------------------------------------


def bundled_scenario_names() -> list[str]:
    files = resources.files("rfswarm").joinpath("scenarios")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def bundled_scenario(name: str) -> Scenario:
    path = resources.files("rfswarm").joinpath("scenarios").joinpath(f"{name}.json")
    if not path.is_file():
        raise FileNotFoundError(
            f"no bundled scenario {name!r}; available: {bundled_scenario_names()}"
        )
    return Scenario.from_json(path.read_text(encoding="utf-8"))
