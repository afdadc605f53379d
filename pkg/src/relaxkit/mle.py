"""Reference estimator: grid-search initialization plus per-voxel trust-region
nonlinear least squares, with an optional Laplacian smoothness penalty on the
inversion-efficiency field B.

Unregularized parameters decouple per voxel, so the plain path is one batched
Levenberg-Marquardt run over all voxels. With lambda_b > 0 (inversion recovery
only) the fit alternates per-voxel (A, T1) sweeps with damped Gauss-Newton
updates of the spatially coupled B field.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .containers import ParameterMap, SequenceKind, WeightedSeries
from .errors import ConfigError, InvariantError
from .models import value_and_jacobian
from .optimize import lm_fit

# projection bounds used during optimization; the returned map re-clamps B
# into the container-valid (0, 2]
_T_BOUNDS = (1.0, 1e5)
_B_BOUNDS = (1e-3, 2.5)


def _log_grid(lo: float, hi: float, count: int) -> tuple:
    return tuple(float(v) for v in np.geomspace(lo, hi, count))


@dataclass(frozen=True)
class MleConfig:
    """Grid-initialization ranges, regularization weight, and LM controls."""

    t1_grid: tuple = _log_grid(50.0, 5000.0, 50)
    b_grid: tuple = (1.6, 1.8, 2.0)
    t2_grid: tuple = _log_grid(10.0, 3000.0, 50)
    lambda_b: float = 500.0
    max_iters: int = 200
    step_tol: float = 1e-8
    radius0: float = 1.0
    grow: float = 2.0
    shrink: float = 0.5
    max_sweeps: int = 20
    voxel_iters_per_sweep: int = 40
    b_field_iters: int = 8

    def __post_init__(self):
        if self.lambda_b < 0:
            raise ConfigError("lambda_b must be >= 0")
        for name in ("t1_grid", "b_grid", "t2_grid"):
            grid = np.asarray(getattr(self, name), dtype=np.float64)
            if grid.size == 0 or np.any(grid <= 0):
                raise ConfigError(f"{name} must be non-empty and positive")
            object.__setattr__(self, name, tuple(float(g) for g in grid))
        if self.max_iters < 1 or self.max_sweeps < 1:
            raise ConfigError("iteration limits must be positive")

    def to_json(self) -> dict:
        return {
            "t1_grid": list(self.t1_grid),
            "b_grid": list(self.b_grid),
            "t2_grid": list(self.t2_grid),
            "lambda_b": self.lambda_b,
            "max_iters": self.max_iters,
            "step_tol": self.step_tol,
            "radius0": self.radius0,
            "grow": self.grow,
            "shrink": self.shrink,
            "max_sweeps": self.max_sweeps,
            "voxel_iters_per_sweep": self.voxel_iters_per_sweep,
            "b_field_iters": self.b_field_iters,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MleConfig":
        kwargs = dict(payload)
        for name in ("t1_grid", "b_grid", "t2_grid"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad MLE config: {exc}") from exc


@lru_cache(maxsize=8)
def _laplacian_matrix(shape: tuple[int, int]) -> sparse.csr_matrix:
    """5-point stencil with replicate padding at the borders, as (M, M) sparse."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []

    def add(source, value):
        rows.append(idx.ravel())
        cols.append(source.ravel())
        vals.append(np.full(source.size, value))

    add(idx, -4.0)
    for shift in (1, -1):
        add(idx[np.clip(np.arange(h) + shift, 0, h - 1), :], 1.0)
        add(idx[:, np.clip(np.arange(w) + shift, 0, w - 1)], 1.0)
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h * w),
    )
    return mat.tocsr()


@lru_cache(maxsize=8)
def _laplacian_gram(shape: tuple[int, int]) -> sparse.csr_matrix:
    lap = _laplacian_matrix(shape)
    return (lap.T @ lap).tocsr()


def laplacian_penalty(b_field: np.ndarray) -> float:
    """Sum over voxels of the squared 5-point Laplacian (replicate borders)."""
    b_field = np.asarray(b_field, dtype=np.float64)
    if b_field.ndim != 2:
        raise InvariantError("laplacian_penalty expects a 2D field")
    lap = _laplacian_matrix(b_field.shape) @ b_field.ravel()
    return float(lap @ lap)


def _series_arrays(series: WeightedSeries):
    data = series.data.astype(np.float64).reshape(-1, series.n_images)
    return data, series.protocol.tau_ms, series.protocol.sequence_kind


def init_search(series: WeightedSeries, config: Optional[MleConfig] = None) -> ParameterMap:
    """Per-voxel best grid candidate, with A solved linearly per candidate.

    Candidates are enumerated relaxation-time-major (B minor for inversion
    recovery); ties keep the lowest candidate index.
    """
    config = config or MleConfig()
    signal, tau, kind = _series_arrays(series)
    if kind is SequenceKind.INVERSION_RECOVERY:
        t1 = np.repeat(np.asarray(config.t1_grid), len(config.b_grid))
        b = np.tile(np.asarray(config.b_grid), len(config.t1_grid))
        basis = np.abs(1.0 - b[:, None] * np.exp(-tau[None, :] / t1[:, None]))
    else:
        t2 = np.asarray(config.t2_grid)
        basis = np.exp(-tau[None, :] / t2[:, None])

    gram = np.einsum("kn,kn->k", basis, basis)
    proj = signal @ basis.T  # (M, K)
    a_star = np.maximum(proj / np.maximum(gram, 1e-300), 0.0)
    ssr = np.sum(signal * signal, axis=1, keepdims=True) - a_star * (
        2.0 * proj - a_star * gram
    )
    best = np.argmin(ssr, axis=1)
    h, w = series.shape
    a_map = np.take_along_axis(a_star, best[:, None], axis=1)[:, 0].reshape(h, w)
    if kind is SequenceKind.INVERSION_RECOVERY:
        data = np.stack([a_map, b[best].reshape(h, w), t1[best].reshape(h, w)], axis=-1)
    else:
        data = np.stack([a_map, np.asarray(t2)[best].reshape(h, w)], axis=-1)
    return ParameterMap(kind.channels, data)


@dataclass
class MleFitResult:
    map: ParameterMap
    converged: np.ndarray  # (H, W) bool
    n_iters: int
    objective_history: Optional[list] = None


def _bounds_for(kind: SequenceKind):
    if kind is SequenceKind.INVERSION_RECOVERY:
        lo = np.array([0.0, _B_BOUNDS[0], _T_BOUNDS[0]])
        hi = np.array([np.inf, _B_BOUNDS[1], _T_BOUNDS[1]])
    else:
        lo = np.array([0.0, _T_BOUNDS[0]])
        hi = np.array([np.inf, _T_BOUNDS[1]])
    return lo, hi


def _final_map(theta: np.ndarray, shape, kind: SequenceKind) -> ParameterMap:
    data = theta.reshape(shape[0], shape[1], -1).copy()
    data[..., 0] = np.maximum(data[..., 0], 0.0)
    if kind is SequenceKind.INVERSION_RECOVERY:
        data[..., 1] = np.clip(data[..., 1], _B_BOUNDS[0], 2.0)
        data[..., 2] = np.clip(data[..., 2], *_T_BOUNDS)
    else:
        data[..., 1] = np.clip(data[..., 1], *_T_BOUNDS)
    return ParameterMap(kind.channels, data)


def fit(
    series: WeightedSeries,
    config: Optional[MleConfig] = None,
    sigma: Optional[float] = None,
    init: Optional[ParameterMap] = None,
    keep_history: bool = False,
) -> MleFitResult:
    """Minimize the penalized negative log-likelihood over the whole image.

    sigma falls back to the protocol's recorded value, then to 1.0 (the
    unpenalized argmin does not depend on it). The returned map is clamped
    into container validity; per-voxel convergence flags ride along.
    """
    config = config or MleConfig()
    signal, tau, kind = _series_arrays(series)
    if sigma is None:
        sigma = series.protocol.sigma if series.protocol.sigma is not None else 1.0
    if sigma <= 0:
        raise ConfigError("sigma must be positive")

    start = init if init is not None else init_search(series, config)
    theta0 = start.data.astype(np.float64).reshape(signal.shape[0], -1)
    bounds = _bounds_for(kind)
    theta0 = np.clip(theta0, bounds[0], bounds[1])

    if kind is SequenceKind.SPIN_ECHO_DECAY or config.lambda_b == 0.0:
        def residual_jac(theta, rows):
            pred, jac = value_and_jacobian(theta, tau, kind)
            return (pred - signal[rows]) / sigma, jac / sigma

        res = lm_fit(
            residual_jac,
            theta0,
            bounds=bounds,
            max_iters=config.max_iters,
            step_tol=config.step_tol,
            radius0=config.radius0,
            grow=config.grow,
            shrink=config.shrink,
            keep_history=keep_history,
        )
        theta, converged, n_iters = res.theta, res.converged, res.n_iters
        history = res.cost_history
    else:
        theta, converged, n_iters, history = _fit_regularized_t1(
            signal, tau, sigma, theta0, config, series.shape, keep_history
        )

    return MleFitResult(
        _final_map(theta, series.shape, kind),
        converged.reshape(series.shape),
        n_iters,
        history,
    )


def _objective(signal, tau, sigma, theta, lam, shape):
    pred, _ = value_and_jacobian(theta, tau, SequenceKind.INVERSION_RECOVERY)
    resid = pred - signal
    data_term = float(np.sum(resid * resid)) / (2.0 * sigma**2)
    return data_term + lam * laplacian_penalty(theta[:, 1].reshape(shape))


def _fit_regularized_t1(signal, tau, sigma, theta0, config, shape, keep_history):
    """Block-coordinate descent: per-voxel (A, T1) LM, then a damped GN step
    on the B field with the Laplacian penalty."""
    kind = SequenceKind.INVERSION_RECOVERY
    lam = config.lambda_b
    theta = theta0.copy()
    m = theta.shape[0]
    gram2 = (2.0 * lam) * _laplacian_gram(shape)
    bounds_at = _bounds_for(kind)
    voxel_bounds = (bounds_at[0][[0, 2]], bounds_at[1][[0, 2]])

    converged = np.zeros(m, dtype=bool)
    history = [] if keep_history else None
    if keep_history:
        history.append(_objective(signal, tau, sigma, theta, lam, shape))

    field_radius = config.radius0
    total_iters = 0
    for sweep in range(config.max_sweeps):
        # --- voxel phase: (A, T1) with B frozen ---
        b_fixed = theta[:, 1].copy()

        def residual_jac(sub, rows):
            full = np.concatenate(
                [sub[:, :1], b_fixed[rows, None], sub[:, 1:]], axis=1
            )
            pred, jac = value_and_jacobian(full, tau, kind)
            return (pred - signal[rows]) / sigma, jac[..., [0, 2]] / sigma

        res = lm_fit(
            residual_jac,
            theta[:, [0, 2]],
            bounds=voxel_bounds,
            max_iters=config.voxel_iters_per_sweep,
            step_tol=config.step_tol,
            radius0=config.radius0,
            grow=config.grow,
            shrink=config.shrink,
        )
        voxel_step = np.linalg.norm(res.theta - theta[:, [0, 2]]) / (
            np.linalg.norm(theta[:, [0, 2]]) + 1e-30
        )
        theta[:, 0] = res.theta[:, 0]
        theta[:, 2] = res.theta[:, 1]
        converged = res.converged
        total_iters += res.n_iters
        if keep_history:
            history.append(_objective(signal, tau, sigma, theta, lam, shape))

        # --- field phase: B with (A, T1) frozen ---
        field_step = 0.0
        for _ in range(config.b_field_iters):
            pred, jac = value_and_jacobian(theta, tau, kind)
            resid = pred - signal
            jb = jac[..., 1]
            cost = float(np.sum(resid * resid)) / (2.0 * sigma**2)
            b = theta[:, 1]
            lap_b = gram2 @ b
            obj = cost + 0.5 * float(b @ lap_b)  # 0.5*b'(2*lam*L'L)b = lam*||Lb||^2
            grad = np.einsum("mn,mn->m", resid, jb) / sigma**2 + lap_b
            data_diag = np.einsum("mn,mn->m", jb, jb) / sigma**2
            hess = sparse.diags(data_diag) + gram2
            diag_full = hess.diagonal()
            mu = 1.0 / field_radius
            damped = hess + sparse.diags(mu * np.maximum(diag_full, 1e-32) + 1e-32)
            delta = splu(damped.tocsc()).solve(-grad)
            trial_b = np.clip(b + delta, _B_BOUNDS[0], _B_BOUNDS[1])
            step = trial_b - b
            pred_red = -(grad @ step + 0.5 * step @ (hess @ step))
            trial_theta = theta.copy()
            trial_theta[:, 1] = trial_b
            trial_pred, _ = value_and_jacobian(trial_theta, tau, kind)
            trial_resid = trial_pred - signal
            trial_obj = float(np.sum(trial_resid * trial_resid)) / (2.0 * sigma**2)
            trial_obj += lam * laplacian_penalty(trial_b.reshape(shape))
            rho = (obj - trial_obj) / pred_red if pred_red > 0 else -np.inf
            rel_step = float(np.linalg.norm(step) / (np.linalg.norm(b) + 1e-30))
            if rho > 0.1:
                theta[:, 1] = trial_b
                field_step = max(field_step, rel_step)
            field_radius *= config.grow if rho > 0.75 else config.shrink
            field_radius = float(np.clip(field_radius, 1e-12, 1e12))
            total_iters += 1
            if (rho > 0.1 and rel_step < config.step_tol) or field_radius <= 1e-12:
                break
        if keep_history:
            history.append(_objective(signal, tau, sigma, theta, lam, shape))

        if max(voxel_step, field_step) < config.step_tol and sweep > 0:
            break

    return theta, converged, total_iters, history
