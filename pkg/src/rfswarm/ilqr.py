"""Finite-horizon LQR and iterative LQR over stacked intensity means.

The swarm cost couples the component means through the intensity
self-interaction terms, so the solver treats the whole stack of means
as one state with block-diagonal dynamics (every block is the same
per-component model).  The backward pass exploits that structure
instead of forming the Kronecker products densely.

Regularization follows the Levenberg-Marquardt heuristic with the
penalty placed on the states rather than the control: the value Hessian
is shifted by mu * I before being pushed through the input map, so for
large mu the gains steer the new trajectory toward the old one instead
of vanishing.  The forward pass is a backtracking line search accepting
steps whose actual cost reduction is at least c1 times the reduction
predicted by the quadratic model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .divergence import DistanceKind, mixture_distance, _self_terms
from .dynamics import LinearModel
from .gmix import GaussianMixture

__all__ = [
    "MixtureTrajectoryCost",
    "IlqrOptions",
    "IlqrProblem",
    "IlqrSolution",
    "LqrProblem",
    "LqrSolution",
    "MixtureStageCost",
    "MixtureTerminalCost",
    "NonPdError",
    "QuadraticStageCost",
    "QuadraticTerminalCost",
    "RegState",
    "StackedDynamics",
    "backward_pass",
    "forward_pass",
    "ilqr_solve",
    "lqr_apply",
    "lqr_backward",
    "lqr_cost",
    "quadratize_stage",
    "total_cost",
]


class NonPdError(RuntimeError):
    """Backward pass hit a non-positive-definite control Hessian."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"non-positive-definite control Hessian at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Stacked block-diagonal dynamics.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackedDynamics:
    """n_copies identical linear blocks acting on a stacked state."""

    a: np.ndarray
    b: np.ndarray
    n_copies: int

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def n_states(self) -> int:
        return self.n_copies * self.n_x

    @property
    def n_inputs(self) -> int:
        return self.n_copies * self.n_u

    @cached_property
    def _btb(self) -> np.ndarray:
        return self.b.T @ self.b

    @cached_property
    def _bta(self) -> np.ndarray:
        return self.b.T @ self.a

    def step(self, x: np.ndarray, u: np.ndarray, drift: np.ndarray | None = None) -> np.ndarray:
        c = self.n_copies
        out = (x.reshape(c, self.n_x) @ self.a.T + u.reshape(c, self.n_u) @ self.b.T).ravel()
        if drift is not None:
            out = out + drift
        return out

    def tx(self, v: np.ndarray) -> np.ndarray:
        """f_x^T v for a stacked vector v."""
        return (v.reshape(self.n_copies, self.n_x) @ self.a).ravel()

    def tu(self, v: np.ndarray) -> np.ndarray:
        """f_u^T v for a stacked vector v."""
        return (v.reshape(self.n_copies, self.n_x) @ self.b).ravel()

    def _sandwich(self, v: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        # left' V right per (copy, copy) block, batched through BLAS.
        c = self.n_copies
        v_blocks = v.reshape(c, self.n_x, c, self.n_x).transpose(0, 2, 1, 3)
        out = left.T @ v_blocks @ right
        return out.transpose(0, 2, 1, 3).reshape(c * left.shape[1], c * right.shape[1])

    def quad_xx(self, v: np.ndarray) -> np.ndarray:
        """f_x^T V f_x exploiting the block-diagonal structure."""
        return self._sandwich(v, self.a, self.a)

    def quad_uu(self, v: np.ndarray) -> np.ndarray:
        """f_u^T V f_u."""
        return self._sandwich(v, self.b, self.b)

    def quad_ux(self, v: np.ndarray) -> np.ndarray:
        """f_u^T V f_x."""
        return self._sandwich(v, self.b, self.a)

    def mu_uu(self, mu: float) -> np.ndarray:
        """f_u^T (mu I) f_u, the state-penalty regularization term."""
        return mu * np.kron(np.eye(self.n_copies), self._btb)

    def mu_ux(self, mu: float) -> np.ndarray:
        """f_u^T (mu I) f_x."""
        return mu * np.kron(np.eye(self.n_copies), self._bta)


# ---------------------------------------------------------------------------
# Stage cost models.
# ---------------------------------------------------------------------------


class StageCost(Protocol):
    def value(self, x: np.ndarray, u: np.ndarray) -> float: ...

    def quadratics(self, x: np.ndarray, u: np.ndarray): ...


class TerminalCost(Protocol):
    def value(self, x: np.ndarray) -> float: ...

    def quadratics(self, x: np.ndarray): ...


class _DistancePart:
    """Distance-to-target term of the swarm cost at one time step.

    Holds the covariance schedule entry for the controlled components
    and the (fixed) desired mixture.  The <g,g> inner product does not
    depend on the control, so it is computed once here and reused; it is
    still included in reported values for comparability.
    """

    def __init__(self, kind: DistanceKind, comp_weights, comp_covs, target: GaussianMixture):
        self.kind = kind
        self.comp_weights = np.asarray(comp_weights, dtype=float)
        self.comp_covs = np.asarray(comp_covs, dtype=float)
        self.n_x = self.comp_covs.shape[-1]
        self._wg = target.weights
        self._mg = target.means
        self._pg = target.covs
        self._gg = _self_terms(self._wg, self._mg, self._pg, 0)["value"]

    def _means(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(-1, self.n_x)

    def value(self, x: np.ndarray) -> float:
        val, _, _ = mixture_distance(
            self.kind, self.comp_weights, self._means(x), self.comp_covs,
            self._wg, self._mg, self._pg, order=0, gg_value=self._gg,
        )
        return val

    def derivatives(self, x: np.ndarray):
        val, grad, hess = mixture_distance(
            self.kind, self.comp_weights, self._means(x), self.comp_covs,
            self._wg, self._mg, self._pg, order=2, gg_value=self._gg,
        )
        return val, grad, 0.5 * (hess + hess.T)


class MixtureStageCost:
    """Running cost u^T R u + D(f, g) over stacked component means."""

    def __init__(self, r_weight, kind: DistanceKind, comp_weights, comp_covs,
                 target: GaussianMixture):
        self.r_weight = np.asarray(r_weight, dtype=float)
        self.distance = _DistancePart(kind, comp_weights, comp_covs, target)

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        return float(u @ self.r_weight @ u) + self.distance.value(x)

    def quadratics(self, x: np.ndarray, u: np.ndarray):
        _, grad, hess = self.distance.derivatives(x)
        l_u = 2.0 * (self.r_weight @ u)
        l_uu = 2.0 * self.r_weight
        l_ux = np.zeros((u.size, x.size))
        return grad, l_u, hess, l_uu, l_ux


class MixtureTerminalCost:
    """Terminal distance-to-target cost (no control term)."""

    def __init__(self, kind: DistanceKind, comp_weights, comp_covs, target: GaussianMixture):
        self.distance = _DistancePart(kind, comp_weights, comp_covs, target)

    def value(self, x: np.ndarray) -> float:
        return self.distance.value(x)

    def quadratics(self, x: np.ndarray):
        _, grad, hess = self.distance.derivatives(x)
        return grad, hess


class MixtureTrajectoryCost:
    """Vectorized stage evaluations for a whole trajectory.

    Applicable when every step shares the same component covariances
    (held schedule) and control weight; the target may vary per step.
    Evaluating all steps in one batched call removes the per-step
    dispatch overhead that otherwise dominates solves with few
    components.
    """

    def __init__(self, r_weight, kind: DistanceKind, comp_weights, comp_covs,
                 targets, horizon: int):
        """``targets`` is one GaussianMixture or a sequence of horizon+1
        mixtures (index k = step); entry ``horizon`` is the terminal
        target."""
        self.r_weight = np.asarray(r_weight, dtype=float)
        self.kind = kind
        self.comp_weights = np.asarray(comp_weights, dtype=float)
        self.comp_covs = np.asarray(comp_covs, dtype=float)
        self.horizon = horizon
        self.n_x = self.comp_covs.shape[-1]
        if isinstance(targets, GaussianMixture):
            targets = [targets] * (horizon + 1)
        if len(targets) != horizon + 1:
            raise ValueError("need one target per step plus the terminal one")
        self._wg = targets[0].weights
        self._pg = targets[0].covs
        self._mg = np.array([t.means for t in targets])
        self._static = all(t is targets[0] for t in targets)
        from .divergence import _self_terms

        if self._static:
            gg = _self_terms(self._wg, self._mg[0], self._pg, 0)["value"]
            self._gg = np.full(horizon + 1, gg)
        else:
            self._gg = np.array([
                _self_terms(t.weights, t.means, t.covs, 0)["value"] for t in targets])

    def _mg_slice(self, k_lo, k_hi):
        return self._mg[0] if self._static else self._mg[k_lo:k_hi]

    def _distances(self, mf_traj, k_lo, k_hi, order):
        from .divergence import mixture_distance_batch

        return mixture_distance_batch(
            self.kind, self.comp_weights, mf_traj, self.comp_covs,
            self._wg, self._mg_slice(k_lo, k_hi), self._pg,
            order=order, gg_values=self._gg[k_lo:k_hi],
        )

    def batch_values(self, xs, us) -> np.ndarray:
        """Stage costs l(x_k, u_k) for k = 0..horizon-1."""
        mf = xs[:-1].reshape(self.horizon, -1, self.n_x)
        values, _, _ = self._distances(mf, 0, self.horizon, order=0)
        return values + np.einsum("ki,ij,kj->k", us, self.r_weight, us)

    def batch_derivatives(self, xs, us):
        """Per-step (l_x, l_u, l_xx, l_uu, l_ux) tuples."""
        mf = xs[:-1].reshape(self.horizon, -1, self.n_x)
        _, grads, hesses = self._distances(mf, 0, self.horizon, order=2)
        l_uu = 2.0 * self.r_weight
        n_u = us.shape[1]
        l_ux = np.zeros((n_u, grads.shape[1]))
        out = []
        for k in range(self.horizon):
            hess = 0.5 * (hesses[k] + hesses[k].T)
            out.append((grads[k], 2.0 * (self.r_weight @ us[k]), hess, l_uu, l_ux))
        return out

    def terminal_value(self, x) -> float:
        mf = x.reshape(1, -1, self.n_x)
        values, _, _ = self._distances(mf, self.horizon, self.horizon + 1, order=0)
        return float(values[0])

    def terminal_quadratics(self, x):
        mf = x.reshape(1, -1, self.n_x)
        _, grads, hesses = self._distances(mf, self.horizon, self.horizon + 1, order=2)
        return grads[0], 0.5 * (hesses[0] + hesses[0].T)

    # Generic single-step interface so the evaluator can stand in for a
    # stage-cost list entry as well.
    def value(self, x, u) -> float:
        k = 0
        mf = x.reshape(1, -1, self.n_x)
        values, _, _ = self._distances(mf, k, k + 1, order=0)
        return float(values[0]) + float(u @ self.r_weight @ u)


class _TrajectoryTerminal:
    """Terminal-cost view of a MixtureTrajectoryCost."""

    def __init__(self, traj: MixtureTrajectoryCost):
        self._traj = traj

    def value(self, x) -> float:
        return self._traj.terminal_value(x)

    def quadratics(self, x):
        return self._traj.terminal_quadratics(x)


@dataclass(frozen=True)
class QuadraticStageCost:
    """0.5 x'Qx + q'x + 0.5 u'Ru + r'u + u'Px + const."""

    q_mat: np.ndarray
    r_mat: np.ndarray
    q_vec: np.ndarray | None = None
    r_vec: np.ndarray | None = None
    p_cross: np.ndarray | None = None
    const: float = 0.0

    def _parts(self, n: int, m: int):
        q = np.zeros(n) if self.q_vec is None else self.q_vec
        r = np.zeros(m) if self.r_vec is None else self.r_vec
        p = np.zeros((m, n)) if self.p_cross is None else self.p_cross
        return q, r, p

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        q, r, p = self._parts(x.size, u.size)
        return float(
            0.5 * x @ self.q_mat @ x + q @ x
            + 0.5 * u @ self.r_mat @ u + r @ u
            + u @ p @ x + self.const
        )

    def quadratics(self, x: np.ndarray, u: np.ndarray):
        q, r, p = self._parts(x.size, u.size)
        l_x = self.q_mat @ x + q + p.T @ u
        l_u = self.r_mat @ u + r + p @ x
        return l_x, l_u, self.q_mat, self.r_mat, p


@dataclass(frozen=True)
class QuadraticTerminalCost:
    """0.5 x'Qx + q'x + const."""

    q_mat: np.ndarray
    q_vec: np.ndarray | None = None
    const: float = 0.0

    def value(self, x: np.ndarray) -> float:
        q = np.zeros(x.size) if self.q_vec is None else self.q_vec
        return float(0.5 * x @ self.q_mat @ x + q @ x + self.const)

    def quadratics(self, x: np.ndarray):
        q = np.zeros(x.size) if self.q_vec is None else self.q_vec
        return self.q_mat @ x + q, self.q_mat


# ---------------------------------------------------------------------------
# Finite-horizon LQR (value recursion with affine drift).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LqrProblem:
    """Discrete LTI system with quadratic stage and terminal costs.

    The stage cost is 0.5 x'Qx + q'x + 0.5 u'Ru + r'u + u'Px and the
    terminal cost 0.5 x'Q_N x + q_N'x + c.  ``drift`` is an optional
    per-step affine offset entering the dynamics x' = Ax + Bu + g_k.
    """

    a: np.ndarray
    b: np.ndarray
    horizon: int
    x0: np.ndarray
    q_mat: np.ndarray
    r_mat: np.ndarray
    q_vec: np.ndarray | None = None
    r_vec: np.ndarray | None = None
    p_cross: np.ndarray | None = None
    q_term_mat: np.ndarray | None = None
    q_term_vec: np.ndarray | None = None
    c_term: float = 0.0
    drift: np.ndarray | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    def part(self, name: str) -> np.ndarray:
        n, m = self.n_x, self.n_u
        val = getattr(self, name)
        if val is not None:
            return np.asarray(val, dtype=float)
        return {
            "q_vec": np.zeros(n),
            "r_vec": np.zeros(m),
            "p_cross": np.zeros((m, n)),
            "q_term_mat": np.zeros((n, n)),
            "q_term_vec": np.zeros(n),
        }[name]

    def drift_at(self, k: int) -> np.ndarray:
        if self.drift is None:
            return np.zeros(self.n_x)
        return np.asarray(self.drift[k], dtype=float)

    def stage_cost(self) -> QuadraticStageCost:
        return QuadraticStageCost(
            q_mat=np.asarray(self.q_mat, float), r_mat=np.asarray(self.r_mat, float),
            q_vec=self.part("q_vec"), r_vec=self.part("r_vec"), p_cross=self.part("p_cross"),
        )

    def terminal_cost(self) -> QuadraticTerminalCost:
        return QuadraticTerminalCost(
            q_mat=self.part("q_term_mat"), q_vec=self.part("q_term_vec"), const=self.c_term,
        )


@dataclass(frozen=True)
class LqrSolution:
    """Feedback/feedforward gains and the quadratic value parameters."""

    gains_k: tuple[np.ndarray, ...]
    gains_l: tuple[np.ndarray, ...]
    s_mats: tuple[np.ndarray, ...]
    s_vecs: tuple[np.ndarray, ...]
    s_consts: tuple[float, ...]

    def value_at(self, x: np.ndarray, k: int = 0) -> float:
        """Optimal cost-to-go 0.5 x'S_k x + s_k'x + c_k."""
        return float(0.5 * x @ self.s_mats[k] @ x + self.s_vecs[k] @ x + self.s_consts[k])


def lqr_backward(problem: LqrProblem) -> LqrSolution:
    """Riccati value recursion for the finite-horizon LQR problem.

    Propagates S_k, s_k, c_k backwards from the terminal weights and
    returns the affine policy u_k = K_k x + l_k along the way.

    Raises:
        NonPdError: If R + B'S'B fails to be positive definite at some
            step (the problem is not well posed).
    """
    a, b = np.asarray(problem.a, float), np.asarray(problem.b, float)
    q_mat = np.asarray(problem.q_mat, float)
    r_mat = np.asarray(problem.r_mat, float)
    q_vec, r_vec = problem.part("q_vec"), problem.part("r_vec")
    p_cross = problem.part("p_cross")

    s_mat = problem.part("q_term_mat")
    s_vec = problem.part("q_term_vec")
    s_const = float(problem.c_term)
    s_mats, s_vecs, s_consts = [s_mat], [s_vec], [s_const]
    gains_k, gains_l = [], []

    for k in range(problem.horizon - 1, -1, -1):
        g = problem.drift_at(k)
        h_mat = r_mat + b.T @ s_mat @ b
        h_mat = 0.5 * (h_mat + h_mat.T)
        try:
            cho = cho_factor(h_mat)
        except np.linalg.LinAlgError as exc:
            raise NonPdError(k, f"R + B'SB is not positive definite at step {k}") from exc
        g_mat = b.T @ s_mat @ a + p_cross
        h_vec = b.T @ (s_mat @ g) + b.T @ s_vec + r_vec
        k_gain = -cho_solve(cho, g_mat)
        l_gain = -cho_solve(cho, h_vec)

        new_s = q_mat + a.T @ s_mat @ a + g_mat.T @ k_gain
        new_s = 0.5 * (new_s + new_s.T)
        new_vec = q_vec + a.T @ s_vec + a.T @ (s_mat @ g) + g_mat.T @ l_gain
        new_const = s_const + 0.5 * g @ s_mat @ g + s_vec @ g + 0.5 * h_vec @ l_gain

        gains_k.append(k_gain)
        gains_l.append(l_gain)
        s_mats.append(new_s)
        s_vecs.append(new_vec)
        s_consts.append(new_const)
        s_mat, s_vec, s_const = new_s, new_vec, new_const

    return LqrSolution(
        gains_k=tuple(reversed(gains_k)),
        gains_l=tuple(reversed(gains_l)),
        s_mats=tuple(reversed(s_mats)),
        s_vecs=tuple(reversed(s_vecs)),
        s_consts=tuple(reversed(s_consts)),
    )


def lqr_apply(problem: LqrProblem, solution: LqrSolution):
    """Roll the affine policy forward; returns (states, controls, cost)."""
    n, m = problem.n_x, problem.n_u
    xs = np.zeros((problem.horizon + 1, n))
    us = np.zeros((problem.horizon, m))
    xs[0] = problem.x0
    for k in range(problem.horizon):
        us[k] = solution.gains_k[k] @ xs[k] + solution.gains_l[k]
        xs[k + 1] = problem.a @ xs[k] + problem.b @ us[k] + problem.drift_at(k)
    return xs, us, lqr_cost(problem, xs, us)


def lqr_cost(problem: LqrProblem, xs: np.ndarray, us: np.ndarray) -> float:
    """Quadratic cost of a trajectory under the problem weights."""
    stage = problem.stage_cost()
    terminal = problem.terminal_cost()
    total = sum(stage.value(xs[k], us[k]) for k in range(problem.horizon))
    return total + terminal.value(xs[problem.horizon])


# ---------------------------------------------------------------------------
# Iterative LQR.
# ---------------------------------------------------------------------------


@dataclass
class RegState:
    """Levenberg-Marquardt regularization schedule.

    Grows the parameter on backward-pass failure, shrinks it on
    accepted steps, and clamps it to zero once it falls below mu_min so
    an accurate quadratic model recovers pure Newton steps.
    """

    mu_lm: float = 0.0
    mu_min: float = 1e-6
    mu_grow: float = 10.0
    mu_shrink: float = 3.0

    def __post_init__(self):
        if self.mu_lm < 0:
            raise ValueError("mu_lm must be >= 0")

    def increase(self):
        self.mu_lm = max(self.mu_lm, self.mu_min) * self.mu_grow

    def decrease(self):
        self.mu_lm = self.mu_lm / self.mu_shrink
        if self.mu_lm < self.mu_min:
            self.mu_lm = 0.0


@dataclass(frozen=True)
class IlqrOptions:
    max_iters: int = 100
    tol: float = 1e-7
    c1: float = 1e-4
    mu_init: float = 0.0
    mu_min: float = 1e-6
    mu_max: float = 1e14
    n_alpha: int = 11  # line search over alpha = 1, 1/2, ..., 2**-(n_alpha-1)
    u_init: np.ndarray | None = None

    @property
    def alphas(self) -> np.ndarray:
        return 0.5 ** np.arange(self.n_alpha)


@dataclass(frozen=True)
class IlqrProblem:
    """Trajectory optimization over stacked component means.

    The dynamics are block-diagonal: every component mean follows the
    same discretized model.  Stage costs may be arbitrary smooth cost
    objects exposing value/quadratics; the covariance schedule inside
    mixture costs is precomputed by the caller and held fixed, so only
    the means are decision variables.
    """

    model: LinearModel
    n_copies: int
    horizon: int
    x0: np.ndarray
    stage_costs: Sequence[StageCost] = ()
    terminal_cost: TerminalCost | None = None
    drift: np.ndarray | None = None
    trajectory_cost: MixtureTrajectoryCost | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.trajectory_cost is None and len(self.stage_costs) != self.horizon:
            raise ValueError("need one stage cost per step")
        if self.trajectory_cost is None and self.terminal_cost is None:
            raise ValueError("a terminal cost is required")
        x0 = np.asarray(self.x0, dtype=float)
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        object.__setattr__(self, "x0", x0)
        if not self.model.is_discretized:
            raise ValueError("model must be discretized")

    @cached_property
    def dynamics(self) -> StackedDynamics:
        return StackedDynamics(self.model.a_disc, self.model.b_disc, self.n_copies)

    def drift_at(self, k: int) -> np.ndarray | None:
        return None if self.drift is None else self.drift[k]

    def rollout(self, controls: np.ndarray) -> np.ndarray:
        xs = np.zeros((self.horizon + 1, self.dynamics.n_states))
        xs[0] = self.x0
        for k in range(self.horizon):
            xs[k + 1] = self.dynamics.step(xs[k], controls[k], self.drift_at(k))
        return xs


@dataclass(frozen=True)
class IlqrSolution:
    states: np.ndarray
    controls: np.ndarray
    gains_kfb: tuple[np.ndarray, ...]
    gains_kff: tuple[np.ndarray, ...]
    cost: float
    iterations: int
    converged: bool
    diagnostics: tuple[dict, ...]


@dataclass(frozen=True)
class StageQuadratics:
    """Coefficients of the quadratized action-value at one step."""

    q_x: np.ndarray
    q_u: np.ndarray
    q_xx: np.ndarray
    q_uu: np.ndarray
    q_ux: np.ndarray
    q_uu_reg: np.ndarray
    q_ux_reg: np.ndarray


def _stage_quadratics_from_derivs(derivs, next_value, dynamics: StackedDynamics,
                                  mu: float) -> StageQuadratics:
    l_x, l_u, l_xx, l_uu, l_ux = derivs
    v_x, v_xx = next_value
    q_x = l_x + dynamics.tx(v_x)
    q_u = l_u + dynamics.tu(v_x)
    q_xx = l_xx + dynamics.quad_xx(v_xx)
    q_uu = l_uu + dynamics.quad_uu(v_xx)
    q_ux = l_ux + dynamics.quad_ux(v_xx)
    if mu > 0.0:
        q_uu_reg = q_uu + dynamics.mu_uu(mu)
        q_ux_reg = q_ux + dynamics.mu_ux(mu)
    else:
        q_uu_reg, q_ux_reg = q_uu, q_ux
    return StageQuadratics(q_x, q_u, q_xx, q_uu, q_ux, q_uu_reg, q_ux_reg)


def quadratize_stage(x, u, stage: StageCost, next_value, dynamics: StackedDynamics,
                     mu: float = 0.0) -> StageQuadratics:
    """Second-order expansion of cost-to-go about one trajectory point.

    ``next_value`` is the (V_x', V_xx') pair from the later step.  The
    dynamics are linear, so their Hessians vanish; the regularized
    q_uu/q_ux variants shift V_xx' by mu * I before mapping it through
    the input matrix (state penalty rather than control penalty).
    """
    return _stage_quadratics_from_derivs(
        stage.quadratics(x, u), next_value, dynamics, mu)


@dataclass(frozen=True)
class BackwardPassResult:
    gains_kfb: tuple[np.ndarray, ...]
    gains_kff: tuple[np.ndarray, ...]
    dv1: float  # sum_k k'Q_u        (alpha-linear expected-change term)
    dv2: float  # sum_k k'Q_uu k     (alpha-quadratic term)

    def expected_reduction(self, alpha: float) -> float:
        """Model-predicted cost decrease for a forward pass at ``alpha``."""
        return -(alpha * self.dv1 + 0.5 * alpha**2 * self.dv2)


def trajectory_derivatives(problem: IlqrProblem, xs: np.ndarray, us: np.ndarray):
    """Cost gradients/Hessians along a trajectory, one entry per step.

    Computed once per iteration and reused across backward-pass restarts
    at different regularization levels (the derivatives do not depend on
    mu, only the gains do).
    """
    if problem.trajectory_cost is not None:
        stage = problem.trajectory_cost.batch_derivatives(xs, us)
        terminal = problem.trajectory_cost.terminal_quadratics(xs[problem.horizon])
        return stage, terminal
    stage = [problem.stage_costs[k].quadratics(xs[k], us[k]) for k in range(problem.horizon)]
    terminal = problem.terminal_cost.quadratics(xs[problem.horizon])
    return stage, terminal


def backward_pass(problem: IlqrProblem, xs: np.ndarray, us: np.ndarray,
                  mu: float = 0.0, derivatives=None) -> BackwardPassResult:
    """Value recursion along a nominal trajectory.

    Starts from the terminal condition V(x_N) = l_f(x_N) and produces
    per-step feedback/feedforward gains.  The value updates use the
    unregularized coefficients together with the regularized gains,
    which keeps the recursion consistent when mu > 0.  Pass the output
    of ``trajectory_derivatives`` to avoid re-deriving the cost when
    restarting at a larger mu.

    Raises:
        NonPdError: When the regularized control Hessian is not positive
            definite; the caller should raise mu and restart.
    """
    dyn = problem.dynamics
    if derivatives is None:
        derivatives = trajectory_derivatives(problem, xs, us)
    stage_derivs, (t_grad, t_hess) = derivatives
    v_x = t_grad
    v_xx = 0.5 * (t_hess + t_hess.T)
    gains_kfb, gains_kff = [], []
    dv1 = 0.0
    dv2 = 0.0
    for k in range(problem.horizon - 1, -1, -1):
        quads = _stage_quadratics_from_derivs(stage_derivs[k], (v_x, v_xx), dyn, mu)
        try:
            cho = cho_factor(0.5 * (quads.q_uu_reg + quads.q_uu_reg.T))
        except np.linalg.LinAlgError as exc:
            raise NonPdError(k) from exc
        k_fb = -cho_solve(cho, quads.q_ux_reg)
        k_ff = -cho_solve(cho, quads.q_u)
        dv1 += float(k_ff @ quads.q_u)
        dv2 += float(k_ff @ quads.q_uu @ k_ff)
        q_uu_kff = quads.q_uu @ k_ff
        v_x = quads.q_x + k_fb.T @ q_uu_kff + k_fb.T @ quads.q_u + quads.q_ux.T @ k_ff
        v_xx = quads.q_xx + k_fb.T @ quads.q_uu @ k_fb + k_fb.T @ quads.q_ux + quads.q_ux.T @ k_fb
        v_xx = 0.5 * (v_xx + v_xx.T)
        gains_kfb.append(k_fb)
        gains_kff.append(k_ff)
    return BackwardPassResult(
        gains_kfb=tuple(reversed(gains_kfb)),
        gains_kff=tuple(reversed(gains_kff)),
        dv1=dv1,
        dv2=dv2,
    )


def total_cost(problem: IlqrProblem, xs: np.ndarray, us: np.ndarray) -> float:
    if problem.trajectory_cost is not None:
        traj = problem.trajectory_cost
        return float(traj.batch_values(xs, us).sum()) + traj.terminal_value(xs[problem.horizon])
    total = 0.0
    for k in range(problem.horizon):
        total += problem.stage_costs[k].value(xs[k], us[k])
    return total + problem.terminal_cost.value(xs[problem.horizon])


def forward_pass(problem: IlqrProblem, xs: np.ndarray, us: np.ndarray,
                 gains: BackwardPassResult, alpha: float):
    """Closed-loop rollout of the updated policy at step size ``alpha``.

    Returns (new_states, new_controls, new_cost), or None if the rollout
    produced a non-finite state (a divergence signal telling the caller
    to shrink alpha).
    """
    dyn = problem.dynamics
    new_xs = np.zeros_like(xs)
    new_us = np.zeros_like(us)
    new_xs[0] = problem.x0
    for k in range(problem.horizon):
        du = alpha * gains.gains_kff[k] + gains.gains_kfb[k] @ (new_xs[k] - xs[k])
        new_us[k] = us[k] + du
        new_xs[k + 1] = dyn.step(new_xs[k], new_us[k], problem.drift_at(k))
        if not np.all(np.isfinite(new_xs[k + 1])):
            return None
    cost = total_cost(problem, new_xs, new_us)
    if not math.isfinite(cost):
        return None
    return new_xs, new_us, cost


def ilqr_solve(problem: IlqrProblem, options: IlqrOptions | None = None) -> IlqrSolution:
    """Iterate backward/forward passes until the cost stops improving.

    Starts from all-zero controls unless options.u_init is given.  Each
    iteration quadratizes the cost along the nominal trajectory, runs a
    regularized backward pass (restarting with a larger mu on failure),
    then backtracks over alpha until the z-ratio between actual and
    expected cost reduction exceeds c1.  Accepted iterations never
    increase the cost.  Returns the best trajectory found with
    converged=False when the iteration budget is exhausted.
    """
    options = options or IlqrOptions()
    dyn = problem.dynamics
    if options.u_init is not None:
        us = np.array(options.u_init, dtype=float)
        if us.shape != (problem.horizon, dyn.n_inputs):
            raise ValueError("u_init has the wrong shape")
    else:
        us = np.zeros((problem.horizon, dyn.n_inputs))
    xs = problem.rollout(us)
    cost = total_cost(problem, xs, us)

    reg = RegState(mu_lm=options.mu_init, mu_min=options.mu_min)
    gains = None
    diagnostics: list[dict] = []
    converged = False
    iterations = 0

    for it in range(1, options.max_iters + 1):
        iterations = it
        # Derivatives are mu-independent: compute once, reuse on restarts.
        derivs = trajectory_derivatives(problem, xs, us)
        while True:
            try:
                bp = backward_pass(problem, xs, us, reg.mu_lm, derivatives=derivs)
                break
            except NonPdError:
                reg.increase()
                if reg.mu_lm > options.mu_max:
                    return IlqrSolution(
                        states=xs, controls=us,
                        gains_kfb=gains.gains_kfb if gains else (),
                        gains_kff=gains.gains_kff if gains else (),
                        cost=cost, iterations=it, converged=False,
                        diagnostics=tuple(diagnostics),
                    )
        gains = bp

        # A vanishing predicted reduction means the trajectory is already
        # stationary for the quadratic model: stop here.
        if bp.expected_reduction(1.0) < options.tol * (1.0 + abs(cost)):
            converged = True
            break

        accepted = False
        for alpha in options.alphas:
            trial = forward_pass(problem, xs, us, bp, float(alpha))
            if trial is None:
                continue
            new_xs, new_us, new_cost = trial
            expected = bp.expected_reduction(float(alpha))
            if expected > 0.0:
                z = (cost - new_cost) / expected
            else:
                z = 1.0 if new_cost < cost else -1.0
            if z > options.c1:
                accepted = True
                break

        if not accepted:
            reg.increase()
            if reg.mu_lm > options.mu_max:
                break
            continue

        improvement = cost - new_cost
        diagnostics.append({
            "iter": it,
            "cost": new_cost,
            "mu": reg.mu_lm,
            "alpha": float(alpha),
            "z": z,
            "expected_reduction": expected,
        })
        xs, us, cost = new_xs, new_us, new_cost
        reg.decrease()
        if improvement < options.tol * (1.0 + abs(cost)):
            converged = True
            break

    return IlqrSolution(
        states=xs,
        controls=us,
        gains_kfb=gains.gains_kfb if gains else (),
        gains_kff=gains.gains_kff if gains else (),
        cost=cost,
        iterations=iterations,
        converged=converged,
        diagnostics=tuple(diagnostics),
    )


def lqr_to_ilqr(problem: LqrProblem) -> IlqrProblem:
    """Pose an LQR problem as a one-copy ILQR problem (for cross-checks)."""
    model = LinearModel(
        a_cont=np.zeros_like(problem.a), b_cont=np.zeros_like(problem.b),
        a_disc=problem.a, b_disc=problem.b,
        q_proc=np.zeros_like(problem.a), dt=1.0,
    )
    stage = problem.stage_cost()
    return IlqrProblem(
        model=model,
        n_copies=1,
        horizon=problem.horizon,
        x0=problem.x0,
        stage_costs=[stage] * problem.horizon,
        terminal_cost=problem.terminal_cost(),
        drift=problem.drift,
    )
