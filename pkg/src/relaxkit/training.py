"""Shared training loop for the network estimators: on-the-fly batch synthesis,
ADAM updates, loss bookkeeping, and a divergence detector."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .containers import AcquisitionProtocol, SequenceKind
from .errors import ConfigError, TrainingDivergedError
from .protocols import default_protocol
from .rim import ScalingPolicy
from .rng import SeededRng
from .simulate import (
    NoiseConfig,
    PatchSimulator,
    TissuePriorTable,
    default_volume_pool,
)

_DIVERGENCE_FACTOR = 1e3
_DIVERGENCE_PATIENCE = 50


@dataclass(frozen=True)
class TrainingConfig:
    """Data-synthesis and optimization settings for one training run.

    The reference configuration is 3000 iterations of 24-sample batches of
    40x40 patches; smoke tests shrink all three.
    """

    protocol: AcquisitionProtocol
    iterations: int = 3000
    batch_size: int = 24
    patch_size: int = 40
    lr: float = 0.001
    seed: int = 0
    pool_count: int = 10
    pool_size: int = 128
    sigma_acq: Optional[float] = None  # None: log-uniform draw per patch
    priors: TissuePriorTable = field(default_factory=TissuePriorTable)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or self.patch_size < 8:
            raise ConfigError("iterations/batch_size/patch_size too small")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_json(self) -> dict:
        return {
            "sequence_kind": self.protocol.sequence_kind.value,
            "tau_ms": [float(t) for t in self.protocol.tau_ms],
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "lr": self.lr,
            "seed": self.seed,
            "pool_count": self.pool_count,
            "pool_size": self.pool_size,
            "sigma_acq": self.sigma_acq,
            "priors": self.priors.to_json(),
            "noise": self.noise.to_json(),
            "log_every": self.log_every,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TrainingConfig":
        payload = dict(payload)
        kind = SequenceKind(payload.pop("sequence_kind"))
        tau = payload.pop("tau_ms", None)
        protocol = (
            AcquisitionProtocol(kind, np.asarray(tau, dtype=np.float64))
            if tau is not None
            else default_protocol(kind)
        )
        if "priors" in payload:
            payload["priors"] = TissuePriorTable.from_json(payload["priors"])
        if "noise" in payload:
            payload["noise"] = NoiseConfig.from_json(payload["noise"])
        try:
            return cls(protocol=protocol, **payload)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


@dataclass
class Batch:
    series: np.ndarray  # (B, N, H, W) float32
    target_scaled: np.ndarray  # (B, Q, H, W) float32
    mask: np.ndarray  # (B, 1, H, W) float32
    tau: np.ndarray


@dataclass
class TrainResult:
    loss_curve: list  # (iteration, loss, baseline) triples
    final_running_loss: float
    baseline_loss: float


def build_sampler(config: TrainingConfig, rng: SeededRng) -> PatchSimulator:
    pool = default_volume_pool(
        rng.stream(101), count=config.pool_count, size=config.pool_size
    )
    return PatchSimulator(
        volumes=pool,
        patch_size=config.patch_size,
        protocol=config.protocol,
        priors=config.priors,
        noise=config.noise,
        rng=rng.stream(202),
        sigma_acq=config.sigma_acq,
    )


def make_batch(
    sampler: PatchSimulator,
    iteration: int,
    batch_size: int,
    scaling: ScalingPolicy,
    dtype=np.float32,
) -> Batch:
    series_list, target_list, mask_list = [], [], []
    tau = sampler.protocol.tau_ms
    for k in range(batch_size):
        labels, kappa, series = sampler.sample(iteration, k)
        series_list.append(series.data.transpose(2, 0, 1))
        target_list.append(scaling.to_network(kappa.data).transpose(2, 0, 1))
        mask_list.append(labels.mask[None].astype(np.float64))
    return Batch(
        series=np.stack(series_list).astype(dtype),
        target_scaled=np.stack(target_list).astype(dtype),
        mask=np.stack(mask_list).astype(dtype),
        tau=tau,
    )


def run_training(
    params: Sequence[Tensor],
    loss_fn: Callable[[Batch], Tensor],
    baseline_fn: Callable[[Batch], float],
    sampler: PatchSimulator,
    config: TrainingConfig,
    scaling: ScalingPolicy,
) -> TrainResult:
    """Optimize ``params`` with ADAM over on-the-fly batches.

    loss_fn builds the differentiable loss for a batch; baseline_fn scores a
    fixed reference predictor on the same batch (used to sanity-check that
    training actually beats it). Aborts with TrainingDivergedError when the
    loss stays above 1000x the initial loss for 50 consecutive iterations.
    """
    state = ad.init_adam(params, lr=config.lr)
    curve = []
    initial_loss = None
    bad_streak = 0
    window: list[float] = []
    baseline_window: list[float] = []

    for iteration in range(config.iterations):
        batch = make_batch(sampler, iteration, config.batch_size, scaling)
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = loss_fn(batch)
        tape.backward(loss)
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
        ]
        ad.adam_step(params, grads, state)

        loss_val = float(loss.data)
        baseline_val = float(baseline_fn(batch))
        if initial_loss is None and np.isfinite(loss_val):
            initial_loss = max(loss_val, 1e-30)
        if not np.isfinite(loss_val) or (
            initial_loss is not None and loss_val > _DIVERGENCE_FACTOR * initial_loss
        ):
            bad_streak += 1
            if bad_streak >= _DIVERGENCE_PATIENCE:
                raise TrainingDivergedError(
                    f"loss {loss_val:.3e} stayed above {_DIVERGENCE_FACTOR:.0e} x "
                    f"initial for {bad_streak} iterations"
                )
        else:
            bad_streak = 0
        window.append(loss_val)
        baseline_window.append(baseline_val)
        if len(window) > 50:
            window.pop(0)
            baseline_window.pop(0)
        curve.append((iteration, loss_val, baseline_val))

    return TrainResult(
        loss_curve=curve,
        final_running_loss=float(np.mean(window)),
        baseline_loss=float(np.mean(baseline_window)),
    )


def save_loss_curve(path, curve):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss,baseline\n")
        for iteration, loss, baseline in curve:
            fh.write(f"{iteration},{loss!r},{baseline!r}\n")
