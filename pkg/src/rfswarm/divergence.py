"""Closed-form distances between Gaussian-mixture intensities.

Three distances are provided between a controlled intensity ``f`` and a
desired intensity ``g``:

* Cauchy-Schwarz divergence, 0.5 ln<f,f> + 0.5 ln<g,g> - ln<f,g>;
* squared-L2 distance, <f,f> + <g,g> - 2<f,g>, which is stationary at
  f = g and coincides with the Bregman divergence of F(f) = f^2;
* squared-L2 plus a scaled negative log-likelihood term that keeps the
  gradient alive far from the targets, at the cost of losing the
  stationary point at f = g.

All three reduce to sums of pairwise Gaussian cross-likelihoods, so
their first and second derivatives with respect to the controlled means
are available analytically:

    d/dm_f  N(m_g; m_f, S) = N * S^-1 (m_g - m_f)
    d2/dm_f2 N(m_g; m_f, S) = N * (S^-1 d d^T S^-1 - S^-1)
    d/dm_f  ln N             = S^-1 (m_g - m_f)
    d2/dm_f2 ln N            = -S^-1

These feed the quadratized stage costs of the trajectory optimizers;
finite differencing the O(N_f * N_g) pairwise sums would dominate the
solve time.  Evaluation is pure and deterministic: pair sums use a fixed
reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmix import GaussianMixture, inner_product

__all__ = [
    "CostQuadratization",
    "DistanceKind",
    "cs_divergence",
    "l2_distance",
    "mixture_distance",
    "modified_l2",
    "quadratize",
]

_LOG_2PI = math.log(2.0 * math.pi)

CAUCHY_SCHWARZ = "cauchy_schwarz"
L2 = "l2"
L2_QUADRATIC = "l2_quadratic"
_KINDS = (CAUCHY_SCHWARZ, L2, L2_QUADRATIC)


@dataclass(frozen=True)
class DistanceKind:
    """Selector for the distance used as the running cost.

    Attributes:
        kind: One of "cauchy_schwarz", "l2", "l2_quadratic".
        alpha: Weight of the log-likelihood term; only meaningful for
            "l2_quadratic", ignored otherwise.  Must be >= 0.
    """

    kind: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}, expected one of {_KINDS}")
        if not self.alpha >= 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @classmethod
    def cauchy_schwarz(cls) -> "DistanceKind":
        return cls(CAUCHY_SCHWARZ)

    @classmethod
    def l2(cls) -> "DistanceKind":
        return cls(L2)

    @classmethod
    def l2_quadratic(cls, alpha: float = 1.0) -> "DistanceKind":
        return cls(L2_QUADRATIC, alpha)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == L2_QUADRATIC:
            out["alpha"] = self.alpha
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DistanceKind":
        return cls(data["kind"], float(data.get("alpha", 1.0)))


@dataclass(frozen=True)
class CostQuadratization:
    """Distance value with derivatives w.r.t. the stacked f-means.

    grad_means has length N_f * n_x; hess_means is the matching
    symmetric matrix.  The g-mixture, all covariances, and all weights
    are held fixed: only the controlled means are differentiation
    variables.
    """

    value: float
    grad_means: np.ndarray
    hess_means: np.ndarray


# ---------------------------------------------------------------------------
# Pairwise Gaussian machinery.
#
# Pair grids are indexed [row, col] where the row ranges over the fixed
# (or second) mixture and the column over the differentiated one, so a
# gradient contraction over rows leaves per-component blocks.
# ---------------------------------------------------------------------------


def _uniform(covs: np.ndarray) -> bool:
    return covs.shape[0] > 0 and bool(np.all(covs == covs[0]))


def _pair_gaussians(diff, cov_sum, shared: bool, order: int):
    """Normal densities and solves on a grid of mean differences.

    Args:
        diff: Mean differences, shape (R, C, n).
        cov_sum: Pair covariance, shape (n, n) if shared else (R, C, n, n).
        shared: Whether one covariance serves every pair.
        order: 0 value, 1 +solves, 2 +inverses.

    Returns:
        Tuple (dens, log_dens, md, minv) where md = cov_sum^-1 @ diff and
        minv is the pair inverse; entries past ``order`` are None.
    """
    n = diff.shape[-1]
    if shared:
        chol = np.linalg.cholesky(cov_sum)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        minv = np.linalg.inv(cov_sum)
        minv = 0.5 * (minv + minv.T)
        md = diff @ minv
    else:
        chol = np.linalg.cholesky(cov_sum)
        log_det = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
        minv = np.linalg.inv(cov_sum)
        minv = 0.5 * (minv + np.swapaxes(minv, -1, -2))
        md = np.einsum("...kl,...l->...k", minv, diff)
    quad = (diff * md).sum(axis=-1)
    log_dens = -0.5 * (n * _LOG_2PI + log_det + quad)
    dens = np.exp(log_dens)
    if order == 0:
        return dens, log_dens, None, None
    if order == 1:
        return dens, log_dens, md, None
    return dens, log_dens, md, minv


def _cross_terms(wf, mf, pf, wg, mg, pg, order: int, with_log: bool):
    """Sums over (g_j, f_i) pairs of N and optionally ln N.

    Only the f-means are treated as variables.  Returns a dict with keys
    value, grad, hess (and log_value/log_grad/log_hess when requested);
    derivative entries are None below the requested order.
    """
    n_f, n_x = mf.shape
    n_g = mg.shape[0]
    out = {"value": 0.0, "grad": None, "hess": None}
    if with_log:
        out.update({"log_value": 0.0, "log_grad": None, "log_hess": None})
    if n_f == 0 or n_g == 0:
        if order >= 1:
            out["grad"] = np.zeros(n_f * n_x)
            if with_log:
                out["log_grad"] = np.zeros(n_f * n_x)
        if order >= 2:
            out["hess"] = np.zeros((n_f * n_x, n_f * n_x))
            if with_log:
                out["log_hess"] = np.zeros((n_f * n_x, n_f * n_x))
        return out

    diff = mg[:, None, :] - mf[None, :, :]
    shared = _uniform(pf) and _uniform(pg)
    cov_sum = pg[0] + pf[0] if shared else pg[:, None, :, :] + pf[None, :, :, :]
    dens, log_dens, md, minv = _pair_gaussians(diff, cov_sum, shared, order)

    out["value"] = float(np.einsum("j,i,ji->", wg, wf, dens))
    if with_log:
        out["log_value"] = float(np.einsum("j,i,ji->", wg, wf, log_dens))
    if order == 0:
        return out

    grad = np.einsum("j,ji,jik->ik", wg, dens, md) * wf[:, None]
    out["grad"] = grad.reshape(n_f * n_x)
    if with_log:
        log_grad = np.einsum("j,jik->ik", wg, md) * wf[:, None]
        out["log_grad"] = log_grad.reshape(n_f * n_x)
    if order == 1:
        return out

    outer = md[..., :, None] * md[..., None, :]
    core = dens[..., None, None] * (outer - minv)
    blocks = np.einsum("j,jikl->ikl", wg, core) * wf[:, None, None]
    hess = np.zeros((n_f, n_x, n_f, n_x))
    idx = np.arange(n_f)
    hess[idx, :, idx, :] = blocks
    out["hess"] = hess.reshape(n_f * n_x, n_f * n_x)
    if with_log:
        if shared:
            log_blocks = -(wg.sum() * wf)[:, None, None] * minv
        else:
            log_blocks = -np.einsum("j,jikl->ikl", wg, minv) * wf[:, None, None]
        log_hess = np.zeros((n_f, n_x, n_f, n_x))
        log_hess[idx, :, idx, :] = log_blocks
        out["log_hess"] = log_hess.reshape(n_f * n_x, n_f * n_x)
    return out


def _self_terms(wf, mf, pf, order: int):
    """Sum over all ordered (f_i, f_j) pairs of N; every mean is a variable.

    The diagonal pairs contribute a mean-independent constant to the
    value and nothing to the derivatives.  Off-diagonal pairs couple the
    component means, which is what produces the repulsion between
    intensities sharing a target.
    """
    n_f, n_x = mf.shape
    out = {"value": 0.0, "grad": None, "hess": None}
    if n_f == 0:
        if order >= 1:
            out["grad"] = np.zeros(0)
        if order >= 2:
            out["hess"] = np.zeros((0, 0))
        return out

    diff = mf[None, :, :] - mf[:, None, :]  # diff[a, b] = m_b - m_a
    shared = _uniform(pf)
    cov_sum = pf[0] + pf[0] if shared else pf[:, None, :, :] + pf[None, :, :, :]
    dens, _, md, minv = _pair_gaussians(diff, cov_sum, shared, order)

    out["value"] = float(np.einsum("a,b,ab->", wf, wf, dens))
    if order == 0:
        return out

    grad = 2.0 * np.einsum("b,ab,abk->ak", wf, dens, md) * wf[:, None]
    out["grad"] = grad.reshape(n_f * n_x)
    if order == 1:
        return out

    outer = md[..., :, None] * md[..., None, :]
    core = dens[..., None, None] * (outer - minv)
    idx = np.arange(n_f)
    core[idx, idx] = 0.0  # diagonal pairs are constants
    hess = -2.0 * np.einsum("a,b,abkl->akbl", wf, wf, core)
    diag_blocks = 2.0 * np.einsum("b,abkl->akl", wf, core) * wf[:, None, None]
    hess[idx, :, idx, :] += diag_blocks
    out["hess"] = hess.reshape(n_f * n_x, n_f * n_x)
    return out


def mixture_distance(
    kind: DistanceKind,
    wf: np.ndarray,
    mf: np.ndarray,
    pf: np.ndarray,
    wg: np.ndarray,
    mg: np.ndarray,
    pg: np.ndarray,
    order: int = 0,
    gg_value: float | None = None,
):
    """Array-level distance engine used by the trajectory optimizers.

    Args:
        kind: Distance selector.
        wf, mf, pf: Weights (N_f,), means (N_f, n_x), covariances of the
            controlled mixture.
        wg, mg, pg: Same for the desired mixture, held fixed.
        order: 0 value only, 1 adds the gradient, 2 adds the Hessian.
        gg_value: Optional precomputed <g,g>; it does not depend on the
            controlled means, so callers evaluating the same target many
            times should cache it.

    Returns:
        (value, grad, hess); grad/hess are None below the requested order.
    """
    with_log = kind.kind == L2_QUADRATIC and kind.alpha > 0.0
    cross = _cross_terms(wf, mf, pf, wg, mg, pg, order, with_log)
    self_f = _self_terms(wf, mf, pf, order)
    if gg_value is None:
        gg_value = _self_terms(wg, mg, pg, 0)["value"]

    if kind.kind == CAUCHY_SCHWARZ:
        s_ff, s_fg = self_f["value"], cross["value"]
        if s_ff <= 0.0 or gg_value <= 0.0:
            raise ValueError("Cauchy-Schwarz divergence needs <f,f> > 0 and <g,g> > 0")
        if s_fg <= 0.0:
            value = math.inf
        else:
            value = 0.5 * math.log(s_ff) + 0.5 * math.log(gg_value) - math.log(s_fg)
        if order == 0:
            return value, None, None
        grad = 0.5 * self_f["grad"] / s_ff - cross["grad"] / s_fg
        if order == 1:
            return value, grad, None
        g_ff = self_f["grad"]
        g_fg = cross["grad"]
        hess = 0.5 * (self_f["hess"] / s_ff - np.outer(g_ff, g_ff) / s_ff**2) - (
            cross["hess"] / s_fg - np.outer(g_fg, g_fg) / s_fg**2
        )
        return value, grad, hess

    value = self_f["value"] + gg_value - 2.0 * cross["value"]
    grad = hess = None
    if order >= 1:
        grad = self_f["grad"] - 2.0 * cross["grad"]
    if order >= 2:
        hess = self_f["hess"] - 2.0 * cross["hess"]
    if with_log:
        value -= kind.alpha * cross["log_value"]
        if order >= 1:
            grad = grad - kind.alpha * cross["log_grad"]
        if order >= 2:
            hess = hess - kind.alpha * cross["log_hess"]
    return value, grad, hess


def mixture_distance_batch(
    kind: DistanceKind,
    wf: np.ndarray,
    mf_traj: np.ndarray,
    pf: np.ndarray,
    wg: np.ndarray,
    mg_traj: np.ndarray,
    pg: np.ndarray,
    order: int = 0,
    gg_values: np.ndarray | None = None,
):
    """Distance over a whole trajectory of stacked means in one call.

    Args:
        mf_traj: Controlled means per step, shape (T, N_f, n_x).
        mg_traj: Desired means per step, shape (T, N_g, n_x) or
            (N_g, n_x) when the target is static.
        pf, pg: Per-component covariances shared by every step.
        gg_values: Optional precomputed <g,g> per step.

    Returns:
        (values (T,), grads (T, N_f*n_x) or None,
         hesses (T, N_f*n_x, N_f*n_x) or None).

    Equivalent to calling mixture_distance per step; one vectorized
    evaluation avoids the per-step overhead that dominates solver time
    at small component counts.
    """
    t_len, n_f, n_x = mf_traj.shape
    static_target = mg_traj.ndim == 2
    if static_target:
        mg_traj = np.broadcast_to(mg_traj, (t_len,) + mg_traj.shape)
    with_log = kind.kind == L2_QUADRATIC and kind.alpha > 0.0
    shared = _uniform(pf) and _uniform(pg)

    # Cross pairs: d[t, j, i] = m_g^j - m_f^i.
    d_cross = mg_traj[:, :, None, :] - mf_traj[:, None, :, :]
    s_cross = pg[0] + pf[0] if shared else pg[:, None, :, :] + pf[None, :, :, :]
    dens_c, log_dens_c, md_c, minv_c = _pair_gaussians(d_cross, s_cross, shared, order)
    # Self pairs: d[t, a, b] = m_f^b - m_f^a.
    d_self = mf_traj[:, None, :, :] - mf_traj[:, :, None, :]
    s_self = pf[0] + pf[0] if _uniform(pf) else pf[:, None, :, :] + pf[None, :, :, :]
    dens_s, _, md_s, minv_s = _pair_gaussians(d_self, s_self, _uniform(pf), order)

    s_fg = np.einsum("j,i,tji->t", wg, wf, dens_c)
    s_ff = np.einsum("a,b,tab->t", wf, wf, dens_s)
    if gg_values is None:
        if static_target:
            gg_values = np.full(t_len, _self_terms(wg, mg_traj[0], pg, 0)["value"])
        else:
            gg_values = np.array([
                _self_terms(wg, mg_traj[t], pg, 0)["value"] for t in range(t_len)])
    if with_log:
        s_log = np.einsum("j,i,tji->t", wg, wf, log_dens_c)

    if kind.kind == CAUCHY_SCHWARZ:
        values = 0.5 * np.log(s_ff) + 0.5 * np.log(gg_values) - np.log(s_fg)
    else:
        values = s_ff + gg_values - 2.0 * s_fg
        if with_log:
            values = values - kind.alpha * s_log
    if order == 0:
        return values, None, None

    grad_fg = np.einsum("j,tji,tjik->tik", wg, dens_c, md_c) * wf[None, :, None]
    grad_ff = 2.0 * np.einsum("b,tab,tabk->tak", wf, dens_s, md_s) * wf[None, :, None]
    if with_log:
        grad_log = np.einsum("j,tjik->tik", wg, md_c) * wf[None, :, None]
    if kind.kind == CAUCHY_SCHWARZ:
        grads = (0.5 * grad_ff / s_ff[:, None, None]
                 - grad_fg / s_fg[:, None, None]).reshape(t_len, n_f * n_x)
    else:
        grads = (grad_ff - 2.0 * grad_fg)
        if with_log:
            grads = grads - kind.alpha * grad_log
        grads = grads.reshape(t_len, n_f * n_x)
    if order == 1:
        return values, grads, None

    outer_c = md_c[..., :, None] * md_c[..., None, :]
    core_c = dens_c[..., None, None] * (outer_c - minv_c)
    blocks_fg = np.einsum("j,tjikl->tikl", wg, core_c) * wf[None, :, None, None]
    hess_fg = np.zeros((t_len, n_f, n_x, n_f, n_x))
    idx = np.arange(n_f)
    hess_fg[:, idx, :, idx, :] = blocks_fg.transpose(1, 0, 2, 3)

    outer_s = md_s[..., :, None] * md_s[..., None, :]
    core_s = dens_s[..., None, None] * (outer_s - minv_s)
    core_s[:, idx, idx] = 0.0
    hess_ff = -2.0 * np.einsum("a,b,tabkl->takbl", wf, wf, core_s)
    diag_ff = 2.0 * np.einsum("b,tabkl->takl", wf, core_s) * wf[None, :, None, None]
    hess_ff[:, idx, :, idx, :] += diag_ff.transpose(1, 0, 2, 3)

    flat = (t_len, n_f * n_x, n_f * n_x)
    if kind.kind == CAUCHY_SCHWARZ:
        g_ff = grad_ff.reshape(t_len, -1)
        g_fg = grad_fg.reshape(t_len, -1)
        hesses = (
            0.5 * (hess_ff.reshape(flat) / s_ff[:, None, None]
                   - np.einsum("ti,tj->tij", g_ff, g_ff) / s_ff[:, None, None] ** 2)
            - (hess_fg.reshape(flat) / s_fg[:, None, None]
               - np.einsum("ti,tj->tij", g_fg, g_fg) / s_fg[:, None, None] ** 2)
        )
    else:
        hesses = hess_ff.reshape(flat) - 2.0 * hess_fg.reshape(flat)
        if with_log:
            if shared:
                log_blocks = -(wg.sum() * wf)[:, None, None] * minv_c
                log_hess = np.zeros((n_f, n_x, n_f, n_x))
                log_hess[idx, :, idx, :] = log_blocks
                hesses = hesses - kind.alpha * log_hess.reshape(flat[1:])[None]
            else:
                log_blocks = -np.einsum("j,jikl->ikl", wg, minv_c) * wf[:, None, None]
                log_hess = np.zeros((n_f, n_x, n_f, n_x))
                log_hess[idx, :, idx, :] = log_blocks
                hesses = hesses - kind.alpha * log_hess.reshape(flat[1:])[None]
    return values, grads, hesses


def _arrays(mix: GaussianMixture):
    return mix.weights, mix.means, mix.covs


def _check_dims(f: GaussianMixture, g: GaussianMixture):
    if f.dim != g.dim:
        raise ValueError(f"mixture dims differ: {f.dim} vs {g.dim}")


def cs_divergence(f: GaussianMixture, g: GaussianMixture) -> float:
    """Cauchy-Schwarz divergence between two mixture intensities.

    Nonnegative by the Cauchy-Schwarz inequality, zero iff the
    intensities are proportional, and invariant to scaling the weights
    of either argument.

    Raises:
        ValueError: If <f,f> or <g,g> is not strictly positive (empty or
            zero-weight mixture).
    """
    _check_dims(f, g)
    ff = inner_product(f, f)
    gg = inner_product(g, g)
    if ff <= 0.0 or gg <= 0.0:
        raise ValueError("Cauchy-Schwarz divergence needs <f,f> > 0 and <g,g> > 0")
    fg = inner_product(f, g)
    if fg <= 0.0:
        return math.inf
    return 0.5 * math.log(ff) + 0.5 * math.log(gg) - math.log(fg)


def l2_distance(f: GaussianMixture, g: GaussianMixture) -> float:
    """Squared-L2 distance <f,f> + <g,g> - 2<f,g> between intensities.

    Symmetric, nonnegative, and stationary exactly at f = g: the cost is
    minimal once the target intensity is reached.
    """
    _check_dims(f, g)
    return inner_product(f, f) + inner_product(g, g) - 2.0 * inner_product(f, g)


def modified_l2(f: GaussianMixture, g: GaussianMixture, alpha: float) -> float:
    """Squared-L2 distance plus a quadratic-like log-likelihood term.

    Adds -alpha * sum_j sum_i w_g^j w_f^i ln N(m_g^j; m_f^i, P_g^j + P_f^i)
    to the L2 distance.  The extra term grows quadratically away from the
    targets, steering descent from flat far-field regions, but it is not
    stationary at f = g; alpha relaxes its contribution.
    """
    _check_dims(f, g)
    if not alpha >= 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    base = l2_distance(f, g)
    if alpha == 0.0 or len(f) == 0 or len(g) == 0:
        return base
    wf, mf, pf = _arrays(f)
    wg, mg, pg = _arrays(g)
    diff = mg[:, None, :] - mf[None, :, :]
    shared = _uniform(pf) and _uniform(pg)
    cov_sum = pg[0] + pf[0] if shared else pg[:, None, :, :] + pf[None, :, :, :]
    _, log_dens, _, _ = _pair_gaussians(diff, cov_sum, shared, 0)
    return base - alpha * float(np.einsum("j,i,ji->", wg, wf, log_dens))


def quadratize(kind: DistanceKind, f: GaussianMixture, g: GaussianMixture) -> CostQuadratization:
    """Distance value, gradient, and Hessian w.r.t. the stacked f-means.

    The f-means are the differentiation variables; g, all covariances,
    and all weights are held fixed.  The Hessian is symmetrized before
    being returned.
    """
    _check_dims(f, g)
    wf, mf, pf = _arrays(f)
    wg, mg, pg = _arrays(g)
    value, grad, hess = mixture_distance(kind, wf, mf, pf, wg, mg, pg, order=2)
    hess = 0.5 * (hess + hess.T)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise ValueError("distance derivatives are not finite")
    return CostQuadratization(value=value, grad_means=grad, hess_means=hess)
