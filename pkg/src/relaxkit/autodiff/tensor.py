"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ndarray, and while a
``Tape`` is active every primitive appends one record (inputs, output, backward
closure). ``Tape.backward`` walks the records in reverse, so each node is
visited once and fan-out gradients accumulate additively. With no active tape,
primitives run forward-only, which is the inference path.

Storage is float32 by default; building graphs from float64 arrays gives the
tight-tolerance test mode.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericsError

_TAPE_STACK: list["Tape"] = []
_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/inf detection after every primitive (slow; used by tests)."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    return Tensor(arr)


class Tape:
    """Ordered record of executed primitives for one backward pass."""

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        """backward(out_grad) must return one gradient (or None) per input."""
        self._records.append((tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed_grad: Optional[np.ndarray] = None):
        """Accumulate d loss / d x into ``.grad`` of every requires_grad tensor."""
        if seed_grad is None:
            seed_grad = np.ones_like(loss.data)
        loss.accumulate_grad(np.asarray(seed_grad, dtype=loss.data.dtype))
        for inputs, output, backward in reversed(self._records):
            if output.grad is None:
                continue
            grads = backward(output.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(grad)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(
    inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable
) -> Tensor:
    """Wrap a primitive's forward result, recording it if a tape is active."""
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericsError("non-finite values produced by a primitive")
    tape = active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad and tape is not None)
    if out.requires_grad:
        tape.record(inputs, out, backward)
    return out
