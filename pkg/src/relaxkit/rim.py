"""Recurrent inference estimator: a convolutional recurrent cell that maps
(current estimate, likelihood gradient, memory states) to an estimate update,
unrolled for a fixed number of steps.

The cell sees scaled units so every channel is O(1): A and B as-is, T1/1000,
T2/100. The gradient channel is the per-voxel mean squared residual
differentiated with respect to the scaled parameters (sigma-free by
construction) and clamped to +-grad_clip. The cell input width is 2Q -
independent of the number of weighted images - which is what lets one trained
model process series of any length N.

Training differentiates through the whole unroll, including the likelihood-
gradient evaluations; their backward uses the closed-form model curvature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvParams, GruParams, Tensor
from .containers import ParameterMap, SequenceKind, WeightedSeries
from .errors import CompatibilityError, ConfigError, NumericsError
from .models import value_and_jacobian, weighted_curvature
from .rng import SeededRng

_T_EVAL_BOUNDS = (1.0, 1e5)  # projection for model evaluation only
_B_OUT_BOUNDS = (1e-3, 2.0)

INIT_T1_MS = 1000.0
INIT_T2_MS = 100.0
INIT_B = 2.0


@dataclass(frozen=True)
class ScalingPolicy:
    """Per-channel affine map between physical units and network units."""

    channels: tuple[str, ...]
    scales: tuple[float, ...]
    grad_clip: float = 1e3

    def __post_init__(self):
        if len(self.channels) != len(self.scales) or any(
            s <= 0 for s in self.scales
        ):
            raise ConfigError("scaling policy needs one positive scale per channel")

    @classmethod
    def for_kind(cls, kind: SequenceKind) -> "ScalingPolicy":
        if kind is SequenceKind.INVERSION_RECOVERY:
            return cls(kind.channels, (1.0, 1.0, 1000.0))
        return cls(kind.channels, (1.0, 100.0))

    @property
    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float64)

    def to_network(self, physical: np.ndarray) -> np.ndarray:
        return physical / self.scale_array

    def to_physical(self, network: np.ndarray) -> np.ndarray:
        return network * self.scale_array

    def to_json(self) -> dict:
        return {
            "channels": list(self.channels),
            "scales": list(self.scales),
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ScalingPolicy":
        return cls(
            tuple(payload["channels"]),
            tuple(float(s) for s in payload["scales"]),
            float(payload["grad_clip"]),
        )


def scaled_likelihood_gradient(
    kappa_scaled: Tensor,
    series_nchw: np.ndarray,
    tau: np.ndarray,
    scaling: ScalingPolicy,
    kind: SequenceKind,
) -> Tensor:
    """Per-voxel gradient of the mean squared data residual w.r.t. the scaled
    parameters, clamped to +-grad_clip. Differentiable in kappa_scaled; the
    backward pass uses the analytic model curvature.

    kappa_scaled is (B, Q, H, W); the series is a constant (B, N, H, W).
    """
    scales = scaling.scale_array
    t_idx = len(scaling.channels) - 1  # relaxation time is the last channel
    n = tau.size

    phys = kappa_scaled.data.transpose(0, 2, 3, 1).astype(np.float64) * scales
    t_raw = phys[..., t_idx]
    proj_active = (t_raw > _T_EVAL_BOUNDS[0]) & (t_raw < _T_EVAL_BOUNDS[1])
    phys[..., t_idx] = np.clip(t_raw, *_T_EVAL_BOUNDS)

    pred, jac = value_and_jacobian(phys, tau, kind)  # (B,H,W,N), (B,H,W,N,Q)
    resid = pred - series_nchw.transpose(0, 2, 3, 1)
    raw = (2.0 / n) * np.einsum("bhwn,bhwnq->bhwq", resid, jac) * scales
    clip = scaling.grad_clip
    inside = np.abs(raw) <= clip
    clipped = np.clip(raw, -clip, clip)
    out = clipped.transpose(0, 3, 1, 2).astype(kappa_scaled.data.dtype)
    if not np.all(np.isfinite(out)):
        raise NumericsError(
            "non-finite likelihood gradient: scaling is misconfigured"
        )

    def backward(grad_out):
        upstream = grad_out.transpose(0, 2, 3, 1).astype(np.float64) * inside
        gauss = np.einsum("bhwnp,bhwnq->bhwpq", jac, jac)
        gauss += weighted_curvature(phys, tau, kind, resid)
        mat = (2.0 / n) * gauss * scales[:, None] * scales[None, :]
        down = np.einsum("bhwq,bhwpq->bhwp", upstream, mat)
        down[..., t_idx] *= proj_active
        return (down.transpose(0, 3, 1, 2).astype(kappa_scaled.data.dtype),)

    return ad.record_op([kappa_scaled], out, backward)


@dataclass
class RimWeights:
    """Cell parameters plus everything needed to run inference."""

    conv_in: ConvParams  # 2Q -> features, 3x3
    gru1: GruParams
    conv_mid1: ConvParams  # features -> features, 3x3
    conv_mid2: ConvParams
    gru2: GruParams
    conv_out: ConvParams  # features -> Q, 1x1
    scaling: ScalingPolicy
    sequence_kind: SequenceKind
    features: int = 36
    j_steps: int = 6

    @property
    def n_params_channels(self) -> int:
        return len(self.scaling.channels)

    def named_params(self):
        yield from self.conv_in.named_params("conv_in")
        yield from self.gru1.named_params("gru1")
        yield from self.conv_mid1.named_params("conv_mid1")
        yield from self.conv_mid2.named_params("conv_mid2")
        yield from self.gru2.named_params("gru2")
        yield from self.conv_out.named_params("conv_out")

    def params(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_params()]

    def arch(self) -> dict:
        # deliberately contains no reference to the series length N
        return {
            "model": "rim",
            "sequence_kind": self.sequence_kind.value,
            "q": self.n_params_channels,
            "features": self.features,
            "kernel": 3,
            "j_steps": self.j_steps,
            "scaling": self.scaling.to_json(),
        }


def make_rim_weights(
    kind: SequenceKind,
    rng: SeededRng,
    features: int = 36,
    j_steps: int = 6,
    dtype=np.float32,
) -> RimWeights:
    q = kind.n_params
    gen = rng.generator()
    return RimWeights(
        conv_in=ad.make_conv(2 * q, features, 3, gen, dtype),
        gru1=ad.make_gru(features, features, gen, 3, dtype),
        conv_mid1=ad.make_conv(features, features, 3, gen, dtype),
        conv_mid2=ad.make_conv(features, features, 3, gen, dtype),
        gru2=ad.make_gru(features, features, gen, 3, dtype),
        conv_out=ad.make_conv(features, q, 1, gen, dtype),
        scaling=ScalingPolicy.for_kind(kind),
        sequence_kind=kind,
        features=features,
        j_steps=j_steps,
    )


def save_rim_weights(weights: RimWeights, path, extra: Optional[dict] = None):
    named = [(name, t.data) for name, t in weights.named_params()]
    ad.save_weights(path, weights.arch(), named, extra)


def load_rim_weights(path) -> tuple[RimWeights, dict]:
    manifest, arrays = ad.load_weights(path)
    arch = manifest["arch"]
    if arch.get("model") != "rim":
        raise CompatibilityError(f"not a rim weights file: model={arch.get('model')!r}")
    kind = SequenceKind(arch["sequence_kind"])
    weights = make_rim_weights(
        kind, SeededRng(0), features=int(arch["features"]), j_steps=int(arch["j_steps"])
    )
    weights.scaling = ScalingPolicy.from_json(arch["scaling"])
    for name, tensor in weights.named_params():
        if name not in arrays:
            raise CompatibilityError(f"weights file missing tensor {name!r}")
        if tuple(arrays[name].shape) != tensor.data.shape:
            raise CompatibilityError(f"tensor {name!r} has wrong shape in file")
        tensor.data = arrays[name].astype(np.float32)
    return weights, manifest


@dataclass
class RimState:
    """Scaled estimate plus the two memory fields at one unroll step."""

    kappa: Tensor  # (B, Q, H, W), network units
    h1: Tensor
    h2: Tensor
    j: int


def init_estimate(series: WeightedSeries) -> ParameterMap:
    """Starting map: A = per-voxel max over the series, B = 2, T = 1000/100 ms."""
    kind = series.protocol.sequence_kind
    mip = np.maximum(series.data.max(axis=-1), 0.0)
    shape = series.shape
    if kind is SequenceKind.INVERSION_RECOVERY:
        data = np.stack(
            [mip, np.full(shape, INIT_B), np.full(shape, INIT_T1_MS)], axis=-1
        )
    else:
        data = np.stack([mip, np.full(shape, INIT_T2_MS)], axis=-1)
    return ParameterMap(kind.channels, data)


def _init_state_arrays(series_nchw: np.ndarray, weights: RimWeights, dtype):
    """Scaled initial estimate and zeroed memories for a (B, N, H, W) batch."""
    b, _, h, w = series_nchw.shape
    scaling = weights.scaling
    mip = np.maximum(series_nchw.max(axis=1), 0.0)
    if weights.sequence_kind is SequenceKind.INVERSION_RECOVERY:
        init_phys = np.stack(
            [mip, np.full_like(mip, INIT_B), np.full_like(mip, INIT_T1_MS)], axis=1
        )
    else:
        init_phys = np.stack([mip, np.full_like(mip, INIT_T2_MS)], axis=1)
    kappa0 = (init_phys.transpose(0, 2, 3, 1) / scaling.scale_array).transpose(
        0, 3, 1, 2
    )
    zeros = np.zeros((b, weights.features, h, w), dtype=dtype)
    return (
        Tensor(kappa0.astype(dtype)),
        Tensor(zeros.copy()),
        Tensor(zeros.copy()),
    )


def cell_forward(x: Tensor, h1: Tensor, h2: Tensor, weights: RimWeights):
    """One pass of the recurrent cell; returns (delta, h1', h2')."""
    t_in = ad.tanh(weights.conv_in(x))
    h1_new = ad.gru_cell(t_in, h1, weights.gru1)
    mid = ad.tanh(weights.conv_mid1(h1_new))
    mid = ad.tanh(weights.conv_mid2(mid))
    h2_new = ad.gru_cell(mid, h2, weights.gru2)
    delta = weights.conv_out(h2_new)
    return delta, h1_new, h2_new


def step(
    state: RimState,
    series_nchw: np.ndarray,
    tau: np.ndarray,
    weights: RimWeights,
) -> RimState:
    """One inference step: evaluate the likelihood gradient at the current
    estimate, run the cell, and add the predicted increment."""
    grad = scaled_likelihood_gradient(
        state.kappa, series_nchw, tau, weights.scaling, weights.sequence_kind
    )
    x = ad.concat([state.kappa, grad], axis=1)
    delta, h1_new, h2_new = cell_forward(x, state.h1, state.h2, weights)
    kappa_new = ad.add(state.kappa, delta)
    return RimState(kappa_new, h1_new, h2_new, state.j + 1)


def unroll(
    series_nchw: np.ndarray,
    tau: np.ndarray,
    weights: RimWeights,
    j_steps: int,
    dtype=np.float32,
) -> list[RimState]:
    """Initial state plus one state per step (length j_steps + 1)."""
    kappa0, h1, h2 = _init_state_arrays(series_nchw, weights, dtype)
    states = [RimState(kappa0, h1, h2, 0)]
    for _ in range(j_steps):
        states.append(step(states[-1], series_nchw, tau, weights))
    return states


def _clamp_physical(data: np.ndarray, kind: SequenceKind) -> np.ndarray:
    out = data.copy()
    out[..., 0] = np.maximum(out[..., 0], 0.0)
    if kind is SequenceKind.INVERSION_RECOVERY:
        out[..., 1] = np.clip(out[..., 1], *_B_OUT_BOUNDS)
    out[..., -1] = np.clip(out[..., -1], *_T_EVAL_BOUNDS)
    return out


def init_predictor_loss(batch, weights: RimWeights) -> float:
    """Masked scaled MSE of the frozen initial estimate; the training baseline."""
    kappa0, _, _ = _init_state_arrays(batch.series, weights, np.float32)
    w = np.broadcast_to(batch.mask, batch.target_scaled.shape)
    diff = kappa0.data - batch.target_scaled
    return float((w * diff * diff).sum() / w.sum())


def train_rim(config, features: int = 36, j_steps: int = 6):
    """Train a fresh cell on simulated patches; deterministic given the seed.

    Returns (weights, TrainResult). The loss is the step-averaged masked MSE
    in scaled units over the whole unroll.
    """
    from . import training  # local import; training depends on this module

    kind = config.protocol.sequence_kind
    rng = SeededRng(config.seed)
    weights = make_rim_weights(kind, rng.stream(1), features, j_steps)
    sampler = training.build_sampler(config, rng)

    def loss_fn(batch):
        states = unroll(batch.series, batch.tau, weights, j_steps)
        total = None
        for state in states[1:]:
            term = ad.mse_loss(state.kappa, batch.target_scaled, batch.mask)
            total = term if total is None else ad.add(total, term)
        return ad.mul(total, 1.0 / j_steps)

    result = training.run_training(
        weights.params(),
        loss_fn,
        lambda batch: init_predictor_loss(batch, weights),
        sampler,
        config,
        weights.scaling,
    )
    return weights, result


def infer(
    series: WeightedSeries,
    weights: RimWeights,
    j_steps: Optional[int] = None,
    record_trajectory: bool = False,
):
    """Run the unrolled estimator on one series; any N >= 1 works.

    Returns the final ParameterMap, or (map, trajectory) when the per-step
    trajectory is requested (length j_steps + 1, including the init).
    """
    j_steps = weights.j_steps if j_steps is None else int(j_steps)
    kind = weights.sequence_kind
    if series.protocol.sequence_kind is not kind:
        raise CompatibilityError(
            f"weights are for {kind.value}, series is "
            f"{series.protocol.sequence_kind.value}"
        )
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float32)
    states = unroll(nchw, series.protocol.tau_ms, weights, j_steps)

    def to_map(state: RimState) -> ParameterMap:
        phys = weights.scaling.to_physical(
            state.kappa.data[0].transpose(1, 2, 0).astype(np.float64)
        )
        return ParameterMap(kind.channels, _clamp_physical(phys, kind))

    final = to_map(states[-1])
    if record_trajectory:
        return final, [to_map(s) for s in states]
    return final
