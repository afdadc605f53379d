"""Forward signal models, their derivatives, and the Gaussian likelihood.

Magnitude signals are modeled per acquisition time tau (ms):

* inversion recovery:  |A * (1 - B * exp(-tau / T1))|
* spin-echo decay:     |A * exp(-tau / T2)|

All functions are vectorized: a parameter array of shape (..., Q) with an
acquisition-time vector of shape (N,) yields signals of shape (..., N). The
element-wise modulus is differentiated as sign(u) * du, with sign(0) = 0, so
gradients stay bounded at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .containers import (
    AcquisitionProtocol,
    ParameterMap,
    SequenceKind,
    WeightedSeries,
)
from .errors import InvariantError


def _check_finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise InvariantError(f"{name}: inputs must be finite")


def _split_params(params, n: int):
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] != n:
        raise InvariantError(f"expected {n} parameter channels, got {params.shape[-1]}")
    return tuple(params[..., i][..., None] for i in range(n))


def forward_t1(params, tau_ms):
    """Inversion-recovery signal for params (..., 3) = (A, B, T1) at tau (N,)."""
    tau = np.atleast_1d(np.asarray(tau_ms, dtype=np.float64))
    a, b, t1 = _split_params(params, 3)
    _check_finite("forward_t1", a, b, t1, tau)
    if np.any(t1 <= 0):
        raise InvariantError("forward_t1: T1 must be positive")
    return np.abs(a * (1.0 - b * np.exp(-tau / t1)))


def forward_t2(params, tau_ms):
    """Spin-echo decay signal for params (..., 2) = (A, T2) at tau (N,)."""
    tau = np.atleast_1d(np.asarray(tau_ms, dtype=np.float64))
    a, t2 = _split_params(params, 2)
    _check_finite("forward_t2", a, t2, tau)
    if np.any(t2 <= 0):
        raise InvariantError("forward_t2: T2 must be positive")
    return np.abs(a * np.exp(-tau / t2))


def forward(params, tau_ms, kind: SequenceKind):
    if kind is SequenceKind.INVERSION_RECOVERY:
        return forward_t1(params, tau_ms)
    return forward_t2(params, tau_ms)


def _t1_inner_derivs(params, tau):
    a, b, t1 = _split_params(params, 3)
    e = np.exp(-tau / t1)
    u = a * (1.0 - b * e)
    k = tau / (t1 * t1)  # d(-tau/t1)/dt1
    du = np.stack([1.0 - b * e, -a * e, -a * b * e * k], axis=-1)
    return u, du, (a, b, e, k, t1)


def _t2_inner_derivs(params, tau):
    a, t2 = _split_params(params, 2)
    e = np.exp(-tau / t2)
    u = a * e
    k = tau / (t2 * t2)
    du = np.stack([e, a * e * k], axis=-1)
    return u, du, (a, e, k, t2)


def jacobian(params, tau_ms, kind: SequenceKind):
    """d signal / d params, shape (..., N, Q); sign-aware across the modulus."""
    return value_and_jacobian(params, tau_ms, kind)[1]


def value_and_jacobian(params, tau_ms, kind: SequenceKind):
    """Signal and its Jacobian in one pass (they share the exponentials)."""
    tau = np.atleast_1d(np.asarray(tau_ms, dtype=np.float64))
    if kind is SequenceKind.INVERSION_RECOVERY:
        u, du, _ = _t1_inner_derivs(params, tau)
    else:
        u, du, _ = _t2_inner_derivs(params, tau)
    _check_finite("jacobian", u)
    sign = np.sign(u)
    return sign * u, sign[..., None] * du


def curvature(params, tau_ms, kind: SequenceKind):
    """Second derivatives d2 signal / d params2, shape (..., N, Q, Q).

    Valid almost everywhere (the modulus kink is measure zero); used to
    differentiate through likelihood-gradient evaluations.
    """
    tau = np.atleast_1d(np.asarray(tau_ms, dtype=np.float64))
    if kind is SequenceKind.INVERSION_RECOVERY:
        u, _, (a, b, e, k, t1) = _t1_inner_derivs(params, tau)
        n = u.shape[-1]
        d2 = np.zeros(u.shape + (3, 3), dtype=np.float64)
        d_ab = -e
        d_at = -b * e * k
        d_bt = -a * e * k
        d_tt = -a * b * e * (k * k - 2.0 * tau / (t1 ** 3))
        d2[..., 0, 1] = d2[..., 1, 0] = np.broadcast_to(d_ab, u.shape)
        d2[..., 0, 2] = d2[..., 2, 0] = np.broadcast_to(d_at, u.shape)
        d2[..., 1, 2] = d2[..., 2, 1] = np.broadcast_to(d_bt, u.shape)
        d2[..., 2, 2] = np.broadcast_to(d_tt, u.shape)
    else:
        u, _, (a, e, k, t2) = _t2_inner_derivs(params, tau)
        d2 = np.zeros(u.shape + (2, 2), dtype=np.float64)
        d_at = e * k
        d_tt = a * e * (k * k - 2.0 * tau / (t2 ** 3))
        d2[..., 0, 1] = d2[..., 1, 0] = np.broadcast_to(d_at, u.shape)
        d2[..., 1, 1] = np.broadcast_to(d_tt, u.shape)
    return np.sign(u)[..., None, None] * d2


def weighted_curvature(params, tau_ms, kind: SequenceKind, weights):
    """Sum_n weights_n * d2 f_n / d params2, shape (..., Q, Q).

    Contracts over acquisitions without materializing the full (..., N, Q, Q)
    curvature tensor; weights has shape (..., N).
    """
    tau = np.atleast_1d(np.asarray(tau_ms, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if kind is SequenceKind.INVERSION_RECOVERY:
        u, _, (a, b, e, k, t1) = _t1_inner_derivs(params, tau)
        ws = weights * np.sign(u)
        out = np.zeros(u.shape[:-1] + (3, 3), dtype=np.float64)
        wse = ws * e
        out[..., 0, 1] = out[..., 1, 0] = -wse.sum(axis=-1)
        out[..., 0, 2] = out[..., 2, 0] = -(wse * (b * k)).sum(axis=-1)
        out[..., 1, 2] = out[..., 2, 1] = -(wse * (a * k)).sum(axis=-1)
        out[..., 2, 2] = -(wse * (a * b) * (k * k - 2.0 * tau / (t1**3))).sum(axis=-1)
    else:
        u, _, (a, e, k, t2) = _t2_inner_derivs(params, tau)
        ws = weights * np.sign(u)
        out = np.zeros(u.shape[:-1] + (2, 2), dtype=np.float64)
        wse = ws * e
        out[..., 0, 1] = out[..., 1, 0] = (wse * k).sum(axis=-1)
        out[..., 1, 1] = (wse * a * (k * k - 2.0 * tau / (t2**3))).sum(axis=-1)
    return out


@dataclass(frozen=True)
class LikelihoodContext:
    """Protocol plus the noise level the Gaussian likelihood is evaluated at."""

    protocol: AcquisitionProtocol
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise InvariantError("sigma must be positive")

    @classmethod
    def from_protocol(
        cls, protocol: AcquisitionProtocol, sigma: Optional[float] = None
    ) -> "LikelihoodContext":
        """Use the protocol's recorded sigma unless one is supplied explicitly."""
        if sigma is None:
            sigma = protocol.sigma
        if sigma is None:
            raise InvariantError(
                "no sigma available: protocol does not record one and none was given"
            )
        return cls(protocol, float(sigma))


def _check_shapes(kappa: ParameterMap, series: WeightedSeries):
    if kappa.shape != series.shape:
        raise InvariantError(
            f"map shape {kappa.shape} does not match series shape {series.shape}"
        )


def nll(kappa: ParameterMap, series: WeightedSeries, ctx: LikelihoodContext) -> float:
    """Negative log-likelihood, constants dropped: sum of residuals^2 / (2 sigma^2)."""
    _check_shapes(kappa, series)
    pred = forward(kappa.data, ctx.protocol.tau_ms, kappa.sequence_kind)
    resid = pred - series.data.astype(np.float64)
    return float(np.sum(resid * resid) / (2.0 * ctx.sigma**2))


def nll_grad(
    kappa: ParameterMap, series: WeightedSeries, ctx: LikelihoodContext
) -> np.ndarray:
    """Per-voxel gradient of the negative log-likelihood, shape (H, W, Q)."""
    _check_shapes(kappa, series)
    tau = ctx.protocol.tau_ms
    kind = kappa.sequence_kind
    pred = forward(kappa.data, tau, kind)
    resid = pred - series.data.astype(np.float64)
    jac = jacobian(kappa.data, tau, kind)
    return np.einsum("...n,...nq->...q", resid, jac) / ctx.sigma**2
