"""Continuous-time models, zero-order-hold discretization, and the
propagation of Gaussian statistics under linear dynamics.

Two plant families are provided: a planar double integrator for
acceleration-driven rovers, and the linearized relative motion of a
deputy spacecraft about a circular-orbit chief (both the full 6-state
form and its in-plane 4-state reduction, since the out-of-plane axis is
decoupled).  Models are immutable after discretization and safe to
share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from .gmix import _readonly

__all__ = [
    "MU_EARTH",
    "LinearModel",
    "OrbitParams",
    "cwh_model",
    "cwh_planar_model",
    "discretize_zoh",
    "double_integrator",
    "propagate_covariance",
    "propagate_mean",
]

# Standard gravitational parameter of Earth, m^3/s^2.
MU_EARTH = 3.986004418e14

_SYM_RTOL = 1e-10


@dataclass(frozen=True)
class LinearModel:
    """Continuous/discrete pair of state-space matrices.

    a_disc, b_disc, q_proc, and dt are None until the model has been
    discretized; `discretize_zoh` fills them in.  q_proc is the
    per-step process-noise covariance.
    """

    a_cont: np.ndarray
    b_cont: np.ndarray
    a_disc: np.ndarray | None = None
    b_disc: np.ndarray | None = None
    q_proc: np.ndarray | None = None
    dt: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "a_cont", _readonly(self.a_cont, 2, "a_cont"))
        object.__setattr__(self, "b_cont", _readonly(self.b_cont, 2, "b_cont"))
        n = self.a_cont.shape[0]
        if self.a_cont.shape != (n, n):
            raise ValueError("a_cont must be square")
        if self.b_cont.shape[0] != n:
            raise ValueError("b_cont row count must match the state dimension")
        for name in ("a_disc", "b_disc", "q_proc"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _readonly(val, 2, name))

    @property
    def n_states(self) -> int:
        return self.a_cont.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b_cont.shape[1]

    @property
    def is_discretized(self) -> bool:
        return self.a_disc is not None


@dataclass(frozen=True)
class OrbitParams:
    """Circular reference orbit for relative-motion models.

    Attributes:
        mu_grav: Standard gravitational parameter, m^3/s^2.
        a_radius: Circular orbit radius, m.
        n_freq: Orbital frequency sqrt(mu / a^3), rad/s.
    """

    mu_grav: float
    a_radius: float
    n_freq: float

    def __post_init__(self):
        if not self.n_freq > 0:
            raise ValueError(f"orbital frequency must be > 0, got {self.n_freq}")
        expected = math.sqrt(self.mu_grav / self.a_radius**3)
        if abs(self.n_freq - expected) > 1e-12 * expected:
            raise ValueError(
                f"inconsistent orbit: n = {self.n_freq} but sqrt(mu/a^3) = {expected}"
            )

    @classmethod
    def from_orbit(cls, mu_grav: float, a_radius: float) -> "OrbitParams":
        return cls(mu_grav, a_radius, math.sqrt(mu_grav / a_radius**3))

    @classmethod
    def from_mean_motion(cls, n_freq: float, mu_grav: float = MU_EARTH) -> "OrbitParams":
        """Orbit with the given frequency; the radius is backed out of mu."""
        if not n_freq > 0:
            raise ValueError(f"orbital frequency must be > 0, got {n_freq}")
        a_radius = (mu_grav / n_freq**2) ** (1.0 / 3.0)
        return cls(mu_grav, a_radius, math.sqrt(mu_grav / a_radius**3))


def double_integrator() -> LinearModel:
    """Planar acceleration model with state [x, y, xdot, ydot].

    Velocity feeds position; the two control inputs are accelerations.
    """
    a = np.zeros((4, 4))
    a[0, 2] = 1.0
    a[1, 3] = 1.0
    b = np.zeros((4, 2))
    b[2, 0] = 1.0
    b[3, 1] = 1.0
    return LinearModel(a_cont=a, b_cont=b)


def cwh_model(orbit: OrbitParams) -> LinearModel:
    """Relative motion about a circular-orbit chief, LVLH frame.

    State [x, y, z, xdot, ydot, zdot], inputs are the three-axis
    accelerations.  The in-plane axes couple through the orbital
    frequency n; the cross-track axis is an independent oscillator.
    """
    n = orbit.n_freq
    a = np.zeros((6, 6))
    a[0, 3] = 1.0
    a[1, 4] = 1.0
    a[2, 5] = 1.0
    a[3, 0] = 3.0 * n**2
    a[3, 4] = 2.0 * n
    a[4, 3] = -2.0 * n
    a[5, 2] = -(n**2)
    b = np.zeros((6, 3))
    b[3, 0] = 1.0
    b[4, 1] = 1.0
    b[5, 2] = 1.0
    return LinearModel(a_cont=a, b_cont=b)


def cwh_planar_model(orbit: OrbitParams) -> LinearModel:
    """In-plane reduction of the relative-motion model.

    State [x, y, xdot, ydot]; the decoupled cross-track oscillator is
    dropped, which halves the cost of planar scenarios.
    """
    n = orbit.n_freq
    a = np.zeros((4, 4))
    a[0, 2] = 1.0
    a[1, 3] = 1.0
    a[2, 0] = 3.0 * n**2
    a[2, 3] = 2.0 * n
    a[3, 2] = -2.0 * n
    b = np.zeros((4, 2))
    b[2, 0] = 1.0
    b[3, 1] = 1.0
    return LinearModel(a_cont=a, b_cont=b)


def discretize_zoh(model: LinearModel, dt: float, q_proc: np.ndarray | float | None = None) -> LinearModel:
    """Discretize holding the control constant over each interval.

    Computes a_disc = exp(A dt) and b_disc = int_0^dt exp(A s) ds B via
    the exponential of the augmented [[A, B], [0, 0]] block, which is
    exact for LTI models.

    Args:
        model: Continuous-time model.
        dt: Step length in seconds, > 0.
        q_proc: Per-step process-noise covariance; a scalar is expanded
            to that multiple of the identity.  Defaults to 1e-6 * I.

    Returns:
        A new model with the discrete matrices filled in.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    n, m = model.n_states, model.n_inputs
    block = np.zeros((n + m, n + m))
    block[:n, :n] = model.a_cont
    block[:n, n:] = model.b_cont
    phi = expm(block * dt)
    a_disc = phi[:n, :n]
    b_disc = phi[:n, n:]
    if q_proc is None:
        q_proc = 1e-6 * np.eye(n)
    elif np.isscalar(q_proc):
        q_proc = float(q_proc) * np.eye(n)
    else:
        q_proc = np.asarray(q_proc, dtype=float)
        if q_proc.shape != (n, n):
            raise ValueError(f"q_proc shape {q_proc.shape} does not match state dim {n}")
    return replace(model, a_disc=a_disc, b_disc=b_disc, q_proc=q_proc, dt=float(dt))


def _require_discrete(model: LinearModel):
    if not model.is_discretized:
        raise ValueError("model has not been discretized; call discretize_zoh first")


def propagate_mean(model: LinearModel, m: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One-step mean update a_disc @ m + b_disc @ u."""
    _require_discrete(model)
    m = np.asarray(m, dtype=float)
    u = np.asarray(u, dtype=float)
    if m.shape != (model.n_states,):
        raise ValueError(f"state shape {m.shape} does not match dim {model.n_states}")
    if u.shape != (model.n_inputs,):
        raise ValueError(f"input shape {u.shape} does not match dim {model.n_inputs}")
    return model.a_disc @ m + model.b_disc @ u


def propagate_covariance(model: LinearModel, p: np.ndarray) -> np.ndarray:
    """One-step covariance update a_disc @ p @ a_disc^T + q_proc.

    The result is explicitly symmetrized so repeated propagation cannot
    drift away from symmetry.
    """
    _require_discrete(model)
    p = np.asarray(p, dtype=float)
    n = model.n_states
    if p.shape != (n, n):
        raise ValueError(f"covariance shape {p.shape} does not match dim {n}")
    gap = np.abs(p - p.T).max(initial=0.0)
    if gap > _SYM_RTOL * max(np.abs(p).max(initial=0.0), 1e-300):
        raise ValueError(f"covariance is asymmetric: max |P - P^T| = {gap:.3e}")
    out = model.a_disc @ p @ model.a_disc.T + model.q_proc
    return 0.5 * (out + out.T)
