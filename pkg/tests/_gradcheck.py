"""Finite-difference oracles shared by the gradient tests.

Central differences use the 4th-order five-point stencil so the oracle's own
truncation/roundoff noise sits far below the tolerances being asserted.
"""

import numpy as np

from relaxkit.autodiff import Tape


def analytic_grads(build_loss, params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    return float(loss.data), [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]


def _stencil(evaluate, x0, h):
    """(8*(f(x+h)-f(x-h)) - (f(x+2h)-f(x-2h))) / (12h), error O(h^4)."""
    f1p = evaluate(x0 + h)
    f1m = evaluate(x0 - h)
    f2p = evaluate(x0 + 2 * h)
    f2m = evaluate(x0 - 2 * h)
    return (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h)


def entrywise_fd_check(build_loss, params, gen, n_entries=40, h_rel=1e-3, floor=1e-10):
    """Sampled per-entry derivative comparison; returns the max relative error.

    The loss is re-evaluated forward-only, so this oracle is independent of
    the tape machinery it checks.
    """
    _, grads = analytic_grads(build_loss, params)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    n_entries = min(n_entries, total)
    picks = gen.choice(total, size=n_entries, replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi > 0 else 0))
        view = params[pi].data.reshape(-1)
        x0 = float(view[local])
        h = h_rel * max(abs(x0), 1.0)

        def evaluate(value):
            view[local] = value
            out = float(build_loss().data)
            view[local] = x0
            return out

        numeric = _stencil(evaluate, x0, h)
        a = float(grads[pi].reshape(-1)[local])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, rel)
    return worst


def directional_fd_check(build_loss, params, gen, h=1e-3, floor=1e-10):
    """4th-order difference along one random unit direction over all params."""
    _, grads = analytic_grads(build_loss, params)
    direction = [gen.standard_normal(p.data.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction))
    direction = [d / norm for d in direction]
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, direction))
    originals = [p.data.copy() for p in params]

    def evaluate(t):
        for p, x0, d in zip(params, originals, direction):
            p.data = (x0 + t * d).astype(p.data.dtype)
        out = float(build_loss().data)
        for p, x0 in zip(params, originals):
            p.data = x0
        return out

    numeric = _stencil(evaluate, 0.0, h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
