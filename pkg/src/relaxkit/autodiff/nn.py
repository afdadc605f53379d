"""Network building blocks layered on the primitives: parameter containers,
Kaiming initialization, and the convolutional GRU cell."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from ..errors import InvariantError
from .ops import add, batchnorm2d, conv2d, mul, sigmoid, slice_channels, tanh
from .tensor import Tensor


def kaiming_init(shape: tuple[int, ...], rng, fan_mode: str = "fan_in") -> np.ndarray:
    """Zero-mean normal draws with variance 2 / fan."""
    if any(s <= 0 for s in shape):
        raise InvariantError(f"kaiming_init: dims must be positive, got {shape}")
    gen = rng.generator() if hasattr(rng, "generator") else rng
    if len(shape) == 4:
        o, c, kh, kw = shape
        fan_in, fan_out = c * kh * kw, o * kh * kw
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        fan_in = fan_out = int(np.prod(shape))
    fan = fan_in if fan_mode == "fan_in" else fan_out
    return gen.normal(0.0, np.sqrt(2.0 / fan), size=shape)


@dataclass
class ConvParams:
    """Weights of one convolution; bias tensors start at zero."""

    weight: Tensor
    bias: Optional[Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


def make_conv(
    in_ch: int, out_ch: int, ksize: int, rng, dtype=np.float32, bias: bool = True
) -> ConvParams:
    w = kaiming_init((out_ch, in_ch, ksize, ksize), rng).astype(dtype)
    b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(Tensor(w, requires_grad=True), b)


@dataclass
class GruParams:
    """Convolutional gated recurrent unit.

    The three gates' convolutions are stored fused along the output-channel
    axis, (update | reset | candidate), so each cell step needs only one
    convolution of x and one of h. Biases live on the x side only.
    """

    x_conv: ConvParams  # in_ch -> 3 * hidden
    h_conv: ConvParams  # hidden -> 3 * hidden, no bias
    hidden: int

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.x_conv.named_params(f"{prefix}.x_conv")
        yield from self.h_conv.named_params(f"{prefix}.h_conv")


def make_gru(in_ch: int, hidden: int, rng, ksize: int = 3, dtype=np.float32) -> GruParams:
    gen = rng.generator() if hasattr(rng, "generator") else rng
    # per-gate Kaiming draws, stacked: fan_in is per-gate, not 3x
    def gate_stack(cin):
        return np.concatenate(
            [kaiming_init((hidden, cin, ksize, ksize), gen) for _ in range(3)]
        ).astype(dtype)

    x_w = Tensor(gate_stack(in_ch), requires_grad=True)
    x_b = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True)
    h_w = Tensor(gate_stack(hidden), requires_grad=True)
    return GruParams(ConvParams(x_w, x_b), ConvParams(h_w, None), hidden)


def gru_cell(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One GRU step on feature maps: h' = (1 - z) * h + z * candidate."""
    if x.data.shape[0] != h.data.shape[0] or x.data.shape[2:] != h.data.shape[2:]:
        raise InvariantError(
            f"gru_cell: spatial shapes differ, {x.data.shape} vs {h.data.shape}"
        )
    f = params.hidden
    gx = params.x_conv(x)
    gh = params.h_conv(h)
    z = sigmoid(add(slice_channels(gx, 0, f), slice_channels(gh, 0, f)))
    r = sigmoid(add(slice_channels(gx, f, 2 * f), slice_channels(gh, f, 2 * f)))
    cand = tanh(
        add(
            slice_channels(gx, 2 * f, 3 * f),
            mul(r, slice_channels(gh, 2 * f, 3 * f)),
        )
    )
    one_minus_z = add(mul(z, -1.0), 1.0)
    return add(mul(one_minus_z, h), mul(z, cand))


@dataclass
class BatchNorm:
    """Batchnorm parameters plus running-average buffers (state, not graph)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def make_batchnorm(channels: int, dtype=np.float32) -> BatchNorm:
    return BatchNorm(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=np.float64),
        running_var=np.ones(channels, dtype=np.float64),
    )
