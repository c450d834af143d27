"""Gaussian-mixture PHD filter for feedback control under imperfect information.

Propagates the first-order moment (intensity) of the swarm state in
closed form: prediction applies survival, per-component controls,
birth, and optional spawning; the measurement update follows the
Kalman-style component updates with clutter-aware reweighting.  Pruning
and merging keep the component count bounded, and state extraction
turns the intensity into a cardinality estimate plus point estimates
for the controller.

The filter state is a plain GaussianMixture; every step is a pure
function old-state -> new-state, which makes snapshot/replay and
deterministic reruns trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import LinearModel
from .gmix import GaussianComponent, GaussianMixture

__all__ = [
    "PhdModel",
    "PruneParams",
    "SensorModel",
    "SpawnModel",
    "estimate_states",
    "phd_predict",
    "phd_update",
    "prune_merge",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SpawnModel:
    """Linear-Gaussian spawning kernels applied to every parent component.

    Each kernel spawns a component with weight w_parent * weight[k],
    mean f_mat[k] @ m_parent + offset[k], and covariance
    q_cov[k] + f_mat[k] @ P_parent @ f_mat[k]^T.
    """

    weights: np.ndarray
    f_mats: np.ndarray
    offsets: np.ndarray
    q_covs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, float))
        object.__setattr__(self, "f_mats", np.asarray(self.f_mats, float))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, float))
        object.__setattr__(self, "q_covs", np.asarray(self.q_covs, float))


@dataclass(frozen=True)
class PhdModel:
    """Birth/survival/spawn parameters plus the motion model."""

    p_survive: float
    birth: GaussianMixture
    motion: LinearModel
    spawn: SpawnModel | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_survive <= 1.0:
            raise ValueError(f"p_survive must be in [0, 1], got {self.p_survive}")
        if not math.isfinite(self.birth.total_mass()):
            raise ValueError("birth mass must be finite")


@dataclass(frozen=True)
class SensorModel:
    """Detection, measurement-noise, and clutter parameters.

    Clutter is a Poisson point process, uniform over the observation
    window, with intensity clutter_rate / window volume.
    """

    p_detect: float
    h_mat: np.ndarray
    r_meas: np.ndarray
    clutter_rate: float
    window: np.ndarray  # (n_z, 2) low/high bounds of the observed region

    def __post_init__(self):
        object.__setattr__(self, "h_mat", np.asarray(self.h_mat, float))
        object.__setattr__(self, "r_meas", np.asarray(self.r_meas, float))
        object.__setattr__(self, "window", np.asarray(self.window, float))
        if not 0.0 <= self.p_detect <= 1.0:
            raise ValueError(f"p_detect must be in [0, 1], got {self.p_detect}")
        if self.clutter_rate < 0.0:
            raise ValueError(f"clutter_rate must be >= 0, got {self.clutter_rate}")
        n_z = self.h_mat.shape[0]
        if self.r_meas.shape != (n_z, n_z):
            raise ValueError("r_meas shape does not match the measurement dimension")
        if self.window.shape != (n_z, 2):
            raise ValueError("window must have one (low, high) row per measurement axis")
        np.linalg.cholesky(self.r_meas)  # require SPD

    @property
    def n_z(self) -> int:
        return self.h_mat.shape[0]

    @property
    def window_volume(self) -> float:
        return float(np.prod(self.window[:, 1] - self.window[:, 0]))

    @property
    def clutter_density(self) -> float:
        """Clutter intensity K(z) = lambda_c / window volume."""
        if self.clutter_rate == 0.0:
            return 0.0
        return self.clutter_rate / self.window_volume


@dataclass(frozen=True)
class PruneParams:
    """Component-management thresholds (standard GM-PHD practice)."""

    trunc_thresh: float = 1e-5
    merge_dist: float = 4.0
    max_components: int = 300

    def __post_init__(self):
        if self.trunc_thresh <= 0 or self.merge_dist <= 0 or self.max_components <= 0:
            raise ValueError("prune parameters must be positive")


def phd_predict(
    prior: GaussianMixture,
    model: PhdModel,
    controls: np.ndarray | None = None,
) -> GaussianMixture:
    """Time-update of the intensity: survival + birth + spawn.

    Surviving components keep their index order, weights scale by the
    survival probability, means move through the per-component controls
    (zero when absent), and covariances through A P A' + Q.  Birth and
    spawn components are appended after the survivors, so controls
    computed against the prior stay index-aligned with the survivors.
    """
    motion = model.motion
    if not motion.is_discretized:
        raise ValueError("motion model must be discretized")
    a, b, q = motion.a_disc, motion.b_disc, motion.q_proc
    if controls is not None:
        controls = np.asarray(controls, float)
        if controls.shape != (len(prior), motion.n_inputs):
            raise ValueError(
                f"controls shape {controls.shape} does not match "
                f"({len(prior)}, {motion.n_inputs})"
            )
    comps: list[GaussianComponent] = []
    for i, c in enumerate(prior.components):
        u = controls[i] if controls is not None else np.zeros(motion.n_inputs)
        mean = a @ c.mean + b @ u
        cov = a @ c.cov @ a.T + q
        comps.append(GaussianComponent(model.p_survive * c.weight, mean, 0.5 * (cov + cov.T)))
    if model.spawn is not None:
        sp = model.spawn
        for parent in prior.components:
            for k in range(sp.weights.shape[0]):
                mean = sp.f_mats[k] @ parent.mean + sp.offsets[k]
                cov = sp.q_covs[k] + sp.f_mats[k] @ parent.cov @ sp.f_mats[k].T
                comps.append(
                    GaussianComponent(parent.weight * sp.weights[k], mean, 0.5 * (cov + cov.T))
                )
    comps.extend(model.birth.components)
    return GaussianMixture(comps, dim=prior.dim)


def phd_update(
    pred: GaussianMixture,
    measurements,
    sensor: SensorModel,
) -> GaussianMixture:
    """Measurement-update of the predicted intensity.

    Produces the (1 - p_d) missed-detection copy of every predicted
    component plus, for each measurement, one Kalman-updated component
    per predicted component with weights normalized against clutter:
    output count is N_pred * (1 + len(measurements)).
    """
    n_pred = len(pred)
    p_d = sensor.p_detect
    h, r = sensor.h_mat, sensor.r_meas
    measurements = [np.asarray(z, float) for z in measurements]
    for z in measurements:
        if z.shape != (sensor.n_z,):
            raise ValueError(f"measurement shape {z.shape} does not match n_z={sensor.n_z}")

    comps: list[GaussianComponent] = [
        GaussianComponent._trusted((1.0 - p_d) * c.weight, c.mean, c.cov, c.chol.copy())
        for c in pred.components
    ]
    if not measurements or n_pred == 0:
        return GaussianMixture(comps, dim=pred.dim)

    # Per-component innovation statistics are measurement-independent,
    # so gains, posterior covariances, and their factors are built once.
    covs = pred.covs
    means = pred.means
    weights = pred.weights
    s_mats = h @ covs @ h.T + r
    s_mats = 0.5 * (s_mats + np.swapaxes(s_mats, -1, -2))
    try:
        s_chols = np.linalg.cholesky(s_mats)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance") from exc
    s_invs = np.linalg.inv(s_mats)
    gains = covs @ h.T @ s_invs
    posts = (np.eye(pred.dim) - gains @ h) @ covs
    posts = 0.5 * (posts + np.swapaxes(posts, -1, -2))
    post_chols = np.linalg.cholesky(posts)
    zhat = means @ h.T
    log_dets = 2.0 * np.log(np.diagonal(s_chols, axis1=-2, axis2=-1)).sum(axis=-1)
    log_norms = -0.5 * (sensor.n_z * _LOG_2PI + log_dets)

    kappa = sensor.clutter_density
    for z in measurements:
        resid = z - zhat
        quad = np.einsum("ji,jik,jk->j", resid, s_invs, resid)
        likes = np.exp(log_norms - 0.5 * quad)
        denom = kappa + p_d * float(weights @ likes)
        new_w = p_d * weights * likes / denom
        new_means = means + np.einsum("jik,jk->ji", gains, resid)
        for j in range(n_pred):
            comps.append(GaussianComponent._trusted(
                new_w[j], new_means[j], posts[j], post_chols[j].copy()))
    return GaussianMixture(comps, dim=pred.dim)


def prune_merge(intensity: GaussianMixture, params: PruneParams | None = None) -> GaussianMixture:
    """Truncate tiny components, merge near-duplicates, cap the count.

    Components below the truncation threshold are dropped (the only
    mass change).  The heaviest remaining component absorbs every
    component within ``merge_dist`` Mahalanobis units of it, replacing
    the group with its moment-matched Gaussian; this repeats greedily
    and the result is capped at ``max_components`` by weight.
    """
    params = params or PruneParams()
    survivors = [c for c in intensity.components if c.weight >= params.trunc_thresh]
    if not survivors:
        return GaussianMixture([], dim=intensity.dim)
    weights = np.array([c.weight for c in survivors])
    means = np.array([c.mean for c in survivors])
    covs = np.array([c.cov for c in survivors])
    alive = np.ones(len(survivors), dtype=bool)
    merged: list[GaussianComponent] = []
    thresh_sq = params.merge_dist**2
    while alive.any():
        idx = np.flatnonzero(alive)
        pivot = idx[np.argmax(weights[idx])]
        diff = means[idx] - means[pivot]
        sol = np.linalg.solve(covs[pivot], diff.T).T
        group = idx[np.einsum("ij,ij->i", diff, sol) <= thresh_sq]
        w = weights[group].sum()
        mean = weights[group] @ means[group] / w
        spread = mean - means[group]
        cov = np.einsum("g,gij->ij", weights[group], covs[group])
        cov += np.einsum("g,gi,gj->ij", weights[group], spread, spread)
        cov /= w
        merged.append(GaussianComponent(w, mean, 0.5 * (cov + cov.T)))
        alive[group] = False
    merged.sort(key=lambda c: -c.weight)
    return GaussianMixture(merged[: params.max_components], dim=intensity.dim)


def estimate_states(intensity: GaussianMixture):
    """Cardinality and point estimates from an intensity.

    The expected agent count is the total mass; local intensity maxima
    carry the agents, so the estimate returns the means of the
    round(mass) heaviest components among those with weight above 0.5.

    Returns:
        (cardinality, states) where cardinality = round(total mass) and
        states is a list of mean vectors.
    """
    cardinality = int(round(intensity.total_mass()))
    candidates = sorted(
        (c for c in intensity.components if c.weight > 0.5),
        key=lambda c: -c.weight,
    )
    states = [np.array(c.mean) for c in candidates[:cardinality]]
    return cardinality, states
