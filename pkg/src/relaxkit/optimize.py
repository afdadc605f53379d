"""Batched Levenberg-Marquardt trust-region solver for nonlinear least squares.

Solves many independent small problems at once: parameters are an (M, P)
array, residuals (M, N), Jacobians (M, N, P). Each problem keeps its own
trust-region radius and convergence flag, and the per-problem iteration is
identical whether a problem is solved alone or inside a batch - batching is a
vectorization detail, not a coupling.

Step control: solve (J^T J + mu * diag(J^T J)) d = -J^T r with mu = 1/radius,
compute the gain ratio rho of actual to model cost reduction, accept the step
if rho > 0.1, grow the radius x2 if rho > 0.75 and shrink x0.5 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvariantError

_ACCEPT_RHO = 0.1
_GROW_RHO = 0.75
_RADIUS_MIN = 1e-12
_RADIUS_MAX = 1e12
_DIAG_FLOOR = 1e-32


@dataclass
class LMResult:
    theta: np.ndarray  # (M, P)
    cost: np.ndarray  # (M,) final 0.5 * sum(r^2)
    converged: np.ndarray  # (M,) bool: relative step fell below step_tol
    n_iters: int
    cost_history: Optional[list] = None  # per-iteration total cost, debug only


def _solve_damped(hess, grad, mu):
    """Solve (H + mu*diag(H)) d = -g for a batch of (P, P) systems."""
    damped = hess.copy()
    p = damped.shape[-1]
    rng_p = np.arange(p)
    diag = damped[:, rng_p, rng_p]
    damped[:, rng_p, rng_p] = diag + mu[:, None] * np.maximum(diag, _DIAG_FLOOR) + _DIAG_FLOOR
    try:
        return np.linalg.solve(damped, -grad[..., None])[..., 0]
    except np.linalg.LinAlgError:
        # singular voxels: fall back to pseudo-inverse row by row
        out = np.zeros_like(grad)
        for m in range(damped.shape[0]):
            out[m] = np.linalg.lstsq(damped[m], -grad[m], rcond=None)[0]
        return out


def lm_fit(
    residual_jac: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    theta0: np.ndarray,
    *,
    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None,
    max_iters: int = 200,
    step_tol: float = 1e-8,
    radius0: float = 1.0,
    grow: float = 2.0,
    shrink: float = 0.5,
    keep_history: bool = False,
) -> LMResult:
    """Minimize 0.5 * ||r(theta)||^2 per batch row.

    residual_jac(theta, rows) maps (m, P) parameters to residuals (m, N) and
    Jacobians (m, N, P); ``rows`` holds the original batch indices of the rows
    being evaluated, so row-specific data can be looked up. bounds, when
    given, are (lo, hi) arrays of shape (P,) enforced by projection after
    each trial step.
    """
    theta = np.array(theta0, dtype=np.float64)
    if theta.ndim != 2:
        raise InvariantError("theta0 must be (M, P)")
    m, _ = theta.shape

    def cost_of(resid):
        return 0.5 * np.sum(resid * resid, axis=-1)

    resid, jac = residual_jac(theta, np.arange(m))
    cost = cost_of(resid)
    radius = np.full(m, float(radius0))
    active = np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    history = [float(cost.sum())] if keep_history else None

    n_iters = 0
    for n_iters in range(1, max_iters + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        th = theta[idx]
        r, jc = resid[idx], jac[idx]
        hess = np.einsum("mnp,mnq->mpq", jc, jc)
        grad = np.einsum("mnp,mn->mp", jc, r)

        mu = 1.0 / radius[idx]
        delta = _solve_damped(hess, grad, mu)
        trial = th + delta
        if bounds is not None:
            np.clip(trial, bounds[0], bounds[1], out=trial)
        step = trial - th  # actual (projected) step

        pred_red = -(
            np.einsum("mp,mp->m", grad, step)
            + 0.5 * np.einsum("mp,mpq,mq->m", step, hess, step)
        )
        r_new, j_new = residual_jac(trial, idx)
        cost_new = cost_of(r_new)
        actual_red = cost[idx] - cost_new

        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(pred_red > 0, actual_red / pred_red, -np.inf)
        accept = (rho > _ACCEPT_RHO) & np.isfinite(cost_new)

        acc = idx[accept]
        theta[acc] = trial[accept]
        resid[acc] = r_new[accept]
        jac[acc] = j_new[accept]
        cost[acc] = cost_new[accept]

        new_radius = np.where(rho > _GROW_RHO, radius[idx] * grow, radius[idx] * shrink)
        radius[idx] = np.clip(new_radius, _RADIUS_MIN, _RADIUS_MAX)

        scale = np.linalg.norm(th, axis=-1) + 1e-30
        small = accept & (np.linalg.norm(step, axis=-1) / scale < step_tol)
        converged[idx[small]] = True
        # problems whose radius collapsed cannot move anymore: stop them too
        stalled = radius[idx] <= _RADIUS_MIN
        active[idx[small | stalled]] = False

        if keep_history:
            history.append(float(cost.sum()))

    return LMResult(theta, cost, converged, n_iters, history)
