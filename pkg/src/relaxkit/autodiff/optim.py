"""ADAM optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InvariantError
from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params: Sequence[Tensor], lr: float = 0.001) -> AdamState:
    state = AdamState(lr=lr)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState
) -> Sequence[Tensor]:
    """One bias-corrected update; parameters are modified in place."""
    if len(params) != len(state.m):
        raise InvariantError("adam_step: state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise InvariantError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype, copy=False
        )
    return params
