"""Receding-horizon control with an unconstrained quasi-Newton inner solver.

At each outer step the controller minimizes the swarm objective over a
short prediction horizon of t_p steps, applies the first t_c controls,
shifts, and repeats.  The inner solver is a dense BFGS with a strong
Wolfe line search; gradients of the horizon objective are assembled
analytically by chaining the distance gradients backwards through the
linear dynamics (an adjoint recursion), since finite-difference
gradients would dominate the runtime and blur any comparison against
the full-horizon solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .divergence import DistanceKind

from .ilqr import StackedDynamics, _DistancePart

__all__ = [
    "MpcConfig",
    "MpcStepResult",
    "QnOptions",
    "QnResult",
    "RecedingPlan",
    "mpc_run",
    "mpc_step",
    "plan_receding",
    "quasi_newton_minimize",
]


@dataclass(frozen=True)
class QnOptions:
    """Inner-solver knobs: gradient tolerance, budget, Wolfe constants."""

    grad_tol: float = 1e-8
    max_fevals: int = 500
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9


@dataclass(frozen=True)
class MpcConfig:
    """Receding-horizon configuration.

    t_p is the prediction horizon and t_c <= t_p the number of computed
    controls actually applied before replanning (usually one step).
    """

    t_p: int = 3
    t_c: int = 1
    qn_opts: QnOptions = field(default_factory=QnOptions)

    def __post_init__(self):
        if not (1 <= self.t_c <= self.t_p):
            raise ValueError(f"need 1 <= t_c <= t_p, got t_c={self.t_c}, t_p={self.t_p}")


@dataclass(frozen=True)
class QnResult:
    x: np.ndarray
    value: float
    grad_inf: float
    n_fevals: int
    iterations: int
    status: str  # converged | max_fevals | line_search_failed


def _wolfe_search(fun, x, f0, g0, direction, c1, c2, fevals_left):
    """Strong Wolfe line search (bracket + zoom with cubic interpolation).

    Returns (alpha, f_new, g_new, evals) or None when no acceptable step
    was found within the budget.  Non-finite trial values are treated as
    overshoots, which shrinks the bracket.
    """
    dphi0 = float(g0 @ direction)
    if dphi0 >= 0.0:
        return None

    def phi(alpha):
        f, g = fun(x + alpha * direction)
        return f, g, (float(g @ direction) if np.all(np.isfinite(g)) else np.nan)

    def polish(alpha, f_a, g_a, d_a, alpha_ref, d_ref, evals):
        """One secant refinement toward the slice minimizer.

        The secant step is exact on quadratic slices, which keeps BFGS
        equivalent to conjugate gradients on quadratic objectives even
        with a loose curvature constant.
        """
        if abs(d_a) <= 1e-9 * abs(dphi0) or evals >= fevals_left:
            return alpha, f_a, g_a, evals
        denom = d_a - d_ref
        if denom == 0.0 or not np.isfinite(denom):
            return alpha, f_a, g_a, evals
        alpha_p = alpha - d_a * (alpha - alpha_ref) / denom
        if not np.isfinite(alpha_p) or alpha_p <= 0.0:
            return alpha, f_a, g_a, evals
        f_p, g_p, d_p = phi(alpha_p)
        evals += 1
        if np.isfinite(f_p) and f_p <= f_a and f_p <= f0 + c1 * alpha_p * dphi0:
            return alpha_p, f_p, g_p, evals
        return alpha, f_a, g_a, evals

    def cubic_min(a, fa, da, b, fb, db):
        # Minimizer of the cubic interpolant on [a, b]; falls back to bisection.
        d1 = da + db - 3.0 * (fa - fb) / (a - b)
        disc = d1 * d1 - da * db
        if disc < 0.0:
            return 0.5 * (a + b)
        d2 = np.sqrt(disc) * np.sign(b - a)
        denom = db - da + 2.0 * d2
        if denom == 0.0:
            return 0.5 * (a + b)
        t = b - (b - a) * (db + d2 - d1) / denom
        lo, hi = min(a, b), max(a, b)
        if not (lo < t < hi) or not np.isfinite(t):
            return 0.5 * (a + b)
        return t

    evals = 0
    alpha_prev, f_prev, d_prev = 0.0, f0, dphi0
    alpha = 1.0
    alpha_max = 1e10
    bracket = None
    for _ in range(30):
        if evals >= fevals_left:
            return None
        f_a, g_a, d_a = phi(alpha)
        evals += 1
        if not np.isfinite(f_a):
            bracket = (alpha_prev, f_prev, d_prev, alpha, np.inf, np.nan)
            break
        if f_a > f0 + c1 * alpha * dphi0 or (evals > 1 and f_a >= f_prev):
            bracket = (alpha_prev, f_prev, d_prev, alpha, f_a, d_a)
            break
        if abs(d_a) <= -c2 * dphi0:
            return polish(alpha, f_a, g_a, d_a, alpha_prev, d_prev, evals)
        if d_a >= 0.0:
            bracket = (alpha, f_a, d_a, alpha_prev, f_prev, d_prev)
            break
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = min(2.0 * alpha, alpha_max)
    if bracket is None:
        return None

    lo, f_lo, d_lo, hi, f_hi, d_hi = bracket
    for _ in range(40):
        if evals >= fevals_left:
            return None
        if np.isfinite(f_hi) and np.isfinite(d_hi):
            alpha = cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
        else:
            alpha = lo + 0.5 * (hi - lo)
        span = abs(hi - lo)
        if span <= 1e-14 * max(1.0, abs(lo)):
            return None
        # Keep the trial inside the bracket.
        a_min, a_max = min(lo, hi), max(lo, hi)
        alpha = np.clip(alpha, a_min + 0.05 * span, a_max - 0.05 * span)
        f_a, g_a, d_a = phi(alpha)
        evals += 1
        if not np.isfinite(f_a) or f_a > f0 + c1 * alpha * dphi0 or f_a >= f_lo:
            hi, f_hi, d_hi = alpha, f_a, d_a
            continue
        if abs(d_a) <= -c2 * dphi0:
            return polish(alpha, f_a, g_a, d_a, lo, d_lo, evals)
        if d_a * (hi - lo) >= 0.0:
            hi, f_hi, d_hi = lo, f_lo, d_lo
        lo, f_lo, d_lo = alpha, f_a, d_a
    return None


def quasi_newton_minimize(fun, x0: np.ndarray, options: QnOptions | None = None) -> QnResult:
    """Minimize a smooth function with BFGS and a strong Wolfe search.

    Args:
        fun: Callable returning (value, gradient) at a point.
        x0: Starting point; the objective and gradient must be finite here.
        options: Tolerances and budget.

    Returns:
        The best iterate found.  status is "converged" when the gradient
        infinity norm fell below grad_tol, "max_fevals" when the budget
        ran out, "line_search_failed" when no acceptable step exists
        (typically at numerical stationarity).
    """
    opts = options or QnOptions()
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective or gradient not finite at the starting point")
    n = x.size
    n_fevals = 1
    h_inv = np.eye(n)
    best_x, best_f = x.copy(), f
    status = "max_fevals"
    iterations = 0

    while n_fevals < opts.max_fevals:
        grad_inf = float(np.abs(g).max(initial=0.0))
        if grad_inf <= opts.grad_tol:
            status = "converged"
            break
        direction = -h_inv @ g
        if float(g @ direction) >= 0.0:
            h_inv = np.eye(n)
            direction = -g
        hit = _wolfe_search(fun, x, f, g, direction, opts.wolfe_c1, opts.wolfe_c2,
                            opts.max_fevals - n_fevals)
        if hit is None:
            status = "line_search_failed"
            break
        alpha, f_new, g_new, evals = hit
        n_fevals += evals
        iterations += 1
        s = alpha * direction
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if iterations == 1:
                h_inv = (sy / float(y @ y)) * np.eye(n)
            rho = 1.0 / sy
            v = np.eye(n) - rho * np.outer(s, y)
            h_inv = v @ h_inv @ v.T + rho * np.outer(s, s)
        x, f, g = x + s, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
    else:
        status = "max_fevals"

    if f <= best_f:
        best_x, best_f = x, f
    grad_inf = float(np.abs(g).max(initial=0.0))
    if grad_inf <= opts.grad_tol:
        status = "converged"
    return QnResult(x=best_x, value=best_f, grad_inf=grad_inf,
                    n_fevals=n_fevals, iterations=iterations, status=status)


# ---------------------------------------------------------------------------
# Receding-horizon controller.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpcStepResult:
    controls: np.ndarray  # (t_c, n_inputs) applied now
    plan: np.ndarray      # (t_p, n_inputs) full horizon solution (warm start source)
    inner: QnResult


def _horizon_objective(dynamics: StackedDynamics, x0, r_weight, parts, t_p):
    """Objective/gradient over the stacked control sequence.

    J(U) = sum_j u_j'Ru_j + D_j(x_{j+1}) with x_{j+1} = A x_j + B u_j.
    The gradient chains the distance gradients backwards:
    dJ/du_j = 2Ru_j + B' lam_{j+1}, lam_j = dD_j/dx + A' lam_{j+1}.
    """
    m = dynamics.n_inputs

    def fun(u_flat):
        us = u_flat.reshape(t_p, m)
        xs = np.zeros((t_p + 1, dynamics.n_states))
        xs[0] = x0
        value = 0.0
        grads = []
        for j in range(t_p):
            value += float(us[j] @ r_weight @ us[j])
            xs[j + 1] = dynamics.step(xs[j], us[j])
        for j in range(t_p):
            d_val, d_grad, _ = parts[j].derivatives_first_order(xs[j + 1])
            value += d_val
            grads.append(d_grad)
        grad_u = np.zeros((t_p, m))
        lam = np.zeros(dynamics.n_states)
        for j in range(t_p - 1, -1, -1):
            lam = grads[j] + lam
            grad_u[j] = 2.0 * (r_weight @ us[j]) + dynamics.tu(lam)
            lam = dynamics.tx(lam)
        return value, grad_u.ravel()

    return fun


class _HorizonPart(_DistancePart):
    """Distance part with a gradient-only evaluation for the adjoint."""

    def derivatives_first_order(self, x):
        from .divergence import mixture_distance

        val, grad, _ = mixture_distance(
            self.kind, self.comp_weights, self._means(x), self.comp_covs,
            self._wg, self._mg, self._pg, order=1, gg_value=self._gg,
        )
        return val, grad, None


def mpc_step(
    means: np.ndarray,
    cov_schedule: np.ndarray,
    dynamics: StackedDynamics,
    comp_weights: np.ndarray,
    targets,
    r_weight: np.ndarray,
    config: MpcConfig,
    kind: DistanceKind,
    warm_start: np.ndarray | None = None,
) -> MpcStepResult:
    """One receding-horizon solve from the current stacked means.

    Args:
        means: Stacked component means, shape (n_copies * n_x,).
        cov_schedule: Component covariances over the prediction window,
            shape (t_p + 1, n_copies, n_x, n_x); entry j is the schedule
            at offset j from now.
        dynamics: Stacked block dynamics.
        comp_weights: Component weights (held fixed over the horizon).
        targets: Sequence of t_p desired mixtures, one per successor step.
        r_weight: Stacked SPD control weight.
        config: Horizons and inner-solver options.
        kind: Distance used in the running cost.
        warm_start: Previous plan shifted by t_c (zero-padded); defaults
            to all zeros.

    Returns:
        The first t_c controls, the full plan for warm starting, and the
        inner solver result.
    """
    t_p, t_c = config.t_p, config.t_c
    m = dynamics.n_inputs
    parts = [
        _HorizonPart(kind, comp_weights, cov_schedule[j + 1], targets[j])
        for j in range(t_p)
    ]
    fun = _horizon_objective(dynamics, np.asarray(means, float), r_weight, parts, t_p)
    if warm_start is None:
        u0 = np.zeros(t_p * m)
    else:
        u0 = np.asarray(warm_start, float).reshape(t_p * m)
    result = quasi_newton_minimize(fun, u0, config.qn_opts)
    plan = result.x.reshape(t_p, m)
    return MpcStepResult(controls=plan[:t_c].copy(), plan=plan, inner=result)


@dataclass(frozen=True)
class RecedingPlan:
    states: np.ndarray    # (n_steps + 1, n) stacked means under the plan
    controls: np.ndarray  # (n_steps, m)
    records: tuple[dict, ...]


def plan_receding(
    dynamics: StackedDynamics,
    x0: np.ndarray,
    comp_weights: np.ndarray,
    cov_schedule: np.ndarray,
    target_at,
    r_weight: np.ndarray,
    kind: DistanceKind,
    config: MpcConfig,
    n_steps: int,
) -> RecedingPlan:
    """Drive the stacked means over n_steps with receding-horizon control.

    ``target_at(k)`` returns the desired mixture for absolute step k;
    ``cov_schedule`` holds the per-step component covariances over the
    whole run, shape (n_steps + 1, n_copies, n_x, n_x).  Each outer step
    is warm-started from the previous plan shifted by t_c.
    """
    t_p, t_c = config.t_p, config.t_c
    m = dynamics.n_inputs
    xs = np.zeros((n_steps + 1, dynamics.n_states))
    us = np.zeros((n_steps, m))
    xs[0] = np.asarray(x0, float)
    records = []
    warm = np.zeros((t_p, m))
    k = 0
    while k < n_steps:
        horizon = min(t_p, n_steps - k)
        cfg = config if horizon == t_p else MpcConfig(
            t_p=horizon, t_c=min(t_c, horizon), qn_opts=config.qn_opts)
        window = np.arange(k, k + horizon + 1)
        sched = cov_schedule[np.minimum(window, n_steps)]
        targets = [target_at(min(k + j + 1, n_steps)) for j in range(horizon)]
        t_start = time.perf_counter()
        step = mpc_step(xs[k], sched, dynamics, comp_weights, targets, r_weight,
                        cfg, kind, warm_start=warm[:horizon])
        wall_ms = 1e3 * (time.perf_counter() - t_start)
        applied = min(cfg.t_c, n_steps - k)
        for j in range(applied):
            us[k + j] = step.controls[j]
            xs[k + j + 1] = dynamics.step(xs[k + j], us[k + j])
        records.append({
            "step": k,
            "inner_iters": step.inner.iterations,
            "fevals": step.inner.n_fevals,
            "cost": step.inner.value,
            "status": step.inner.status,
            "wallclock_ms": wall_ms,
        })
        # Shift the plan by the applied steps for the next warm start.
        warm = np.zeros((t_p, m))
        remain = horizon - applied
        if remain > 0:
            warm[:remain] = step.plan[applied:horizon]
        k += applied
    return RecedingPlan(states=xs, controls=us, records=tuple(records))


def mpc_run(scenario) -> RecedingPlan:
    """Receding-horizon run of a scenario's intensity means.

    Accepts a Scenario (see swarmsim) whose controller kind is "mpc" and
    returns the planned mean trajectory with per-step diagnostics.  The
    agent-level simulation lives in swarmsim.run_scenario; this entry
    point exposes the controller loop on its own.
    """
    from . import swarmsim

    setup = swarmsim.control_setup(scenario)
    return plan_receding(
        dynamics=setup.dynamics,
        x0=setup.x0,
        comp_weights=setup.weights,
        cov_schedule=setup.cov_schedule,
        target_at=setup.target_at,
        r_weight=setup.r_weight,
        kind=setup.kind,
        config=setup.mpc_config,
        n_steps=setup.n_steps,
    )
