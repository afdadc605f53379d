"""Feed-forward baseline: a fully convolutional residual network mapping a
weighted series directly to parameter maps.

Unlike the recurrent estimator, the head convolution is sized to the training
series length, so each trained model is tied to one N. The residual block is
[conv3x3, batchnorm, relu, conv3x3, batchnorm] with an additive skip (1x1
projection where the width changes) and a post-add relu; there are no pooling
or fully connected layers, keeping inference local and resolution-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, ConvParams, Tensor
from .containers import ParameterMap, SequenceKind, WeightedSeries
from .errors import CompatibilityError
from .rim import ScalingPolicy, _clamp_physical
from .rng import SeededRng

DEFAULT_CHANNEL_PLAN = (40, 40, 80, 80, 160, 320, 160, 80, 80, 40, 6)
_HEAD_WIDTH = 40


@dataclass
class ResidualBlock:
    conv_a: ConvParams
    bn_a: BatchNorm
    conv_b: ConvParams
    bn_b: BatchNorm
    projection: Optional[ConvParams]  # present iff the width changes

    def named_params(self, prefix: str):
        yield from self.conv_a.named_params(f"{prefix}.conv_a")
        yield from self.bn_a.named_params(f"{prefix}.bn_a")
        yield from self.conv_b.named_params(f"{prefix}.conv_b")
        yield from self.bn_b.named_params(f"{prefix}.bn_b")
        if self.projection is not None:
            yield from self.projection.named_params(f"{prefix}.projection")

    def named_buffers(self, prefix: str):
        yield from self.bn_a.named_buffers(f"{prefix}.bn_a")
        yield from self.bn_b.named_buffers(f"{prefix}.bn_b")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        branch = ad.relu(self.bn_a(self.conv_a(x), training))
        branch = self.bn_b(self.conv_b(branch), training)
        skip = x if self.projection is None else self.projection(x)
        return ad.relu(ad.add(branch, skip))


@dataclass
class ResNetWeights:
    head_conv: ConvParams  # 1x1, N -> head width
    head_bn: BatchNorm
    blocks: list
    tail_conv: ConvParams  # 1x1, last width -> Q
    scaling: ScalingPolicy
    sequence_kind: SequenceKind
    trained_n: int
    channel_plan: tuple = DEFAULT_CHANNEL_PLAN

    def named_params(self):
        yield from self.head_conv.named_params("head_conv")
        yield from self.head_bn.named_params("head_bn")
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"block{i:02d}")
        yield from self.tail_conv.named_params("tail_conv")

    def named_buffers(self):
        yield from self.head_bn.named_buffers("head_bn")
        for i, block in enumerate(self.blocks):
            yield from block.named_buffers(f"block{i:02d}")

    def params(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_params()]

    def arch(self) -> dict:
        return {
            "model": "resnet",
            "sequence_kind": self.sequence_kind.value,
            "q": len(self.scaling.channels),
            "n_inputs": self.trained_n,
            "channel_plan": list(self.channel_plan),
            "scaling": self.scaling.to_json(),
        }


def make_resnet_weights(
    kind: SequenceKind,
    n_inputs: int,
    rng: SeededRng,
    channel_plan: tuple = DEFAULT_CHANNEL_PLAN,
    dtype=np.float32,
) -> ResNetWeights:
    q = kind.n_params
    gen = rng.generator()
    blocks = []
    width = _HEAD_WIDTH
    for out_width in channel_plan:
        projection = (
            None
            if out_width == width
            else ad.make_conv(width, out_width, 1, gen, dtype)
        )
        blocks.append(
            ResidualBlock(
                conv_a=ad.make_conv(width, out_width, 3, gen, dtype),
                bn_a=ad.make_batchnorm(out_width, dtype),
                conv_b=ad.make_conv(out_width, out_width, 3, gen, dtype),
                bn_b=ad.make_batchnorm(out_width, dtype),
                projection=projection,
            )
        )
        width = out_width
    return ResNetWeights(
        head_conv=ad.make_conv(n_inputs, _HEAD_WIDTH, 1, gen, dtype),
        head_bn=ad.make_batchnorm(_HEAD_WIDTH, dtype),
        blocks=blocks,
        tail_conv=ad.make_conv(width, q, 1, gen, dtype),
        scaling=ScalingPolicy.for_kind(kind),
        sequence_kind=kind,
        trained_n=int(n_inputs),
        channel_plan=tuple(channel_plan),
    )


def network_forward(x: Tensor, weights: ResNetWeights, training: bool) -> Tensor:
    h = ad.relu(weights.head_bn(weights.head_conv(x), training))
    for block in weights.blocks:
        h = block(h, training)
    return weights.tail_conv(h)


def forward(series: WeightedSeries, weights: ResNetWeights) -> ParameterMap:
    """Single eval-mode pass; raises when N differs from the trained N."""
    n = series.n_images
    if n != weights.trained_n:
        raise CompatibilityError(
            f"resnet weights were trained for N={weights.trained_n} weighted "
            f"images but the series has N={n}; train a matching model or use "
            f"the rim estimator"
        )
    if series.protocol.sequence_kind is not weights.sequence_kind:
        raise CompatibilityError(
            f"weights are for {weights.sequence_kind.value}, series is "
            f"{series.protocol.sequence_kind.value}"
        )
    x = Tensor(series.data.transpose(2, 0, 1)[None].astype(np.float32))
    out = network_forward(x, weights, training=False)
    phys = weights.scaling.to_physical(
        out.data[0].transpose(1, 2, 0).astype(np.float64)
    )
    return ParameterMap(
        weights.sequence_kind.channels,
        _clamp_physical(phys, weights.sequence_kind),
    )


def save_resnet_weights(weights: ResNetWeights, path, extra: Optional[dict] = None):
    named = [(name, t.data) for name, t in weights.named_params()]
    named += [(name, arr) for name, arr in weights.named_buffers()]
    ad.save_weights(path, weights.arch(), named, extra)


def load_resnet_weights(path) -> tuple[ResNetWeights, dict]:
    manifest, arrays = ad.load_weights(path)
    arch = manifest["arch"]
    if arch.get("model") != "resnet":
        raise CompatibilityError(
            f"not a resnet weights file: model={arch.get('model')!r}"
        )
    kind = SequenceKind(arch["sequence_kind"])
    weights = make_resnet_weights(
        kind,
        int(arch["n_inputs"]),
        SeededRng(0),
        channel_plan=tuple(arch["channel_plan"]),
    )
    weights.scaling = ScalingPolicy.from_json(arch["scaling"])
    for name, tensor in weights.named_params():
        if name not in arrays:
            raise CompatibilityError(f"weights file missing tensor {name!r}")
        tensor.data = arrays[name].astype(np.float32)
    for name, buf in weights.named_buffers():
        if name not in arrays:
            raise CompatibilityError(f"weights file missing buffer {name!r}")
        buf[:] = arrays[name].astype(np.float64)
    return weights, manifest


def constant_predictor_loss(batch) -> float:
    """Masked MSE of the best constant (per-channel batch mean) predictor."""
    w = np.broadcast_to(batch.mask, batch.target_scaled.shape)
    total = w.sum(axis=(0, 2, 3), keepdims=True)
    mean = (w * batch.target_scaled).sum(axis=(0, 2, 3), keepdims=True) / total
    diff = batch.target_scaled - mean
    return float((w * diff * diff).sum() / w.sum())


def train_resnet(config, channel_plan: tuple = DEFAULT_CHANNEL_PLAN):
    """Train a fresh network for this protocol's N; deterministic given the seed."""
    from . import training

    kind = config.protocol.sequence_kind
    rng = SeededRng(config.seed)
    weights = make_resnet_weights(
        kind, config.protocol.n_images, rng.stream(1), channel_plan
    )
    sampler = training.build_sampler(config, rng)

    def loss_fn(batch):
        out = network_forward(Tensor(batch.series), weights, training=True)
        return ad.mse_loss(out, batch.target_scaled, batch.mask)

    result = training.run_training(
        weights.params(),
        loss_fn,
        constant_predictor_loss,
        sampler,
        config,
        weights.scaling,
    )
    return weights, result
