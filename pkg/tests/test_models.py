import numpy as np
import pytest

from relaxkit.containers import (
    AcquisitionProtocol,
    ParameterMap,
    SequenceKind,
    WeightedSeries,
)
from relaxkit.errors import InvariantError
from relaxkit.models import (
    LikelihoodContext,
    curvature,
    forward,
    forward_t1,
    forward_t2,
    jacobian,
    nll,
    nll_grad,
)
from relaxkit.rng import SeededRng

IR = SequenceKind.INVERSION_RECOVERY
SE = SequenceKind.SPIN_ECHO_DECAY


def fd_jacobian(params, tau, kind, rel_h=1e-4):
    """Central finite differences, the independent oracle for the Jacobian."""
    params = np.asarray(params, dtype=np.float64)
    q = params.shape[-1]
    n = np.atleast_1d(tau).size
    out = np.zeros(params.shape[:-1] + (n, q))
    for i in range(q):
        h = rel_h * np.maximum(np.abs(params[..., i]), 1e-3)
        plus, minus = params.copy(), params.copy()
        plus[..., i] += h
        minus[..., i] -= h
        out[..., i] = (forward(plus, tau, kind) - forward(minus, tau, kind)) / (
            2.0 * h[..., None]
        )
    return out


def test_forward_t1_point_values():
    assert forward_t1([1.0, 2.0, 1000.0], 1e-9)[0] == pytest.approx(1.0, abs=1e-8)
    zero_tau = 1000.0 * np.log(2.0)
    assert forward_t1([1.0, 2.0, 1000.0], zero_tau)[0] == pytest.approx(0.0, abs=1e-12)
    assert forward_t1([0.65, 2.0, 780.0], 1e6)[0] == pytest.approx(0.65, abs=1e-12)


def test_forward_t2_point_values():
    assert forward_t2([1.0, 100.0], 1e-12)[0] == pytest.approx(1.0)
    assert forward_t2([1.0, 100.0], 100.0)[0] == pytest.approx(np.exp(-1.0), rel=1e-12)
    assert forward_t2([2.0, 50.0], 100.0)[0] == pytest.approx(2 * np.exp(-2.0), rel=1e-12)


def test_forward_rejects_bad_inputs():
    with pytest.raises(InvariantError):
        forward_t2([1.0, -5.0], 10.0)
    with pytest.raises(InvariantError):
        forward_t1([np.nan, 2.0, 100.0], 10.0)


def test_jacobian_t2_point_values():
    jac = jacobian([1.0, 100.0], [100.0], SE)
    # dA at tau=0 is exactly 1
    assert jacobian([1.0, 100.0], [1e-12], SE)[0, 0] == pytest.approx(1.0)
    # frozen value from the central-difference oracle: e^-1 * 100/100^2
    fd = fd_jacobian([1.0, 100.0], [100.0], SE)
    assert jac[0, 1] == pytest.approx(0.00367879, abs=1e-8)
    assert jac[0, 1] == pytest.approx(fd[0, 1], rel=1e-7)


def test_jacobian_t1_sign_handling_at_tau_zero():
    # inner term is 1 - B = -1 at tau -> 0, so d|f|/dB = -sign * A * e^0 = +1
    jac = jacobian([1.0, 2.0, 1000.0], [1e-9], IR)
    fd = fd_jacobian([1.0, 2.0, 1000.0], [1e-9], IR)
    assert jac[0, 1] == pytest.approx(1.0, abs=1e-9)
    assert jac[0, 1] == pytest.approx(fd[0, 1], rel=1e-6)


@pytest.mark.parametrize("kind", [IR, SE])
def test_jacobian_matches_finite_differences(kind):
    gen = SeededRng(42, 1).generator()
    n = 400
    if kind is IR:
        params = np.stack(
            [gen.uniform(0.3, 1.2, n), gen.uniform(1.2, 2.0, n), gen.uniform(300, 4000, n)],
            axis=-1,
        )
        tau = np.array([50.0, 200.0, 500.0, 900.0, 1400.0])
    else:
        params = np.stack([gen.uniform(0.3, 1.2, n), gen.uniform(20, 2500, n)], axis=-1)
        tau = np.array([10.0, 20.0, 40.0, 80.0, 160.0, 320.0])
    jac = jacobian(params, tau, kind)
    fd = fd_jacobian(params, tau, kind)
    signal_inner = forward(params, tau, kind)
    away_from_kink = signal_inner > 1e-3 * params[..., 0][..., None]
    rel = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-9)
    assert np.max(rel[away_from_kink]) < 1e-6


@pytest.mark.parametrize("kind", [IR, SE])
def test_curvature_matches_fd_of_jacobian(kind):
    gen = SeededRng(43, 1).generator()
    n = 100
    if kind is IR:
        params = np.stack(
            [gen.uniform(0.3, 1.2, n), gen.uniform(1.2, 2.0, n), gen.uniform(300, 4000, n)],
            axis=-1,
        )
        tau = np.array([50.0, 400.0, 900.0])
    else:
        params = np.stack([gen.uniform(0.3, 1.2, n), gen.uniform(20, 2500, n)], axis=-1)
        tau = np.array([10.0, 80.0, 320.0])
    q = params.shape[-1]
    curv = curvature(params, tau, kind)
    for i in range(q):
        h = 1e-5 * np.maximum(np.abs(params[..., i]), 1e-3)
        plus, minus = params.copy(), params.copy()
        plus[..., i] += h
        minus[..., i] -= h
        fd = (jacobian(plus, tau, kind) - jacobian(minus, tau, kind)) / (
            2.0 * h[..., None, None]
        )
        inner = forward(params, tau, kind)
        ok = inner > 1e-2 * params[..., 0][..., None]
        rel = np.abs(curv[..., i] - fd) / np.maximum(np.abs(fd), 1e-6)
        assert np.max(rel[ok]) < 1e-4


def _random_case(seed, kind=SE, shape=(4, 4)):
    gen = SeededRng(seed).generator()
    if kind is SE:
        tau = np.array([10.0, 30.0, 90.0, 200.0])
        data = np.stack(
            [gen.uniform(0.3, 1.2, shape), gen.uniform(30, 300, shape)], axis=-1
        )
        channels = ("A", "T2")
    else:
        tau = np.array([100.0, 300.0, 700.0, 900.0])
        data = np.stack(
            [
                gen.uniform(0.3, 1.2, shape),
                gen.uniform(1.2, 2.0, shape),
                gen.uniform(300, 3000, shape),
            ],
            axis=-1,
        )
        channels = ("A", "B", "T1")
    kappa = ParameterMap(channels, data)
    proto = AcquisitionProtocol(kind, tau)
    signal = forward(kappa.data, tau, kind) + gen.normal(0, 0.05, shape + (tau.size,))
    series = WeightedSeries(proto, signal)
    return kappa, series, LikelihoodContext(proto, 0.07)


def test_nll_zero_at_noiseless():
    kappa, series, ctx = _random_case(1)
    clean = WeightedSeries(
        series.protocol, forward(kappa.data, ctx.protocol.tau_ms, SE)
    )
    assert nll(kappa, clean, ctx) == 0.0


def test_nll_single_voxel_closed_form():
    kappa = ParameterMap(("A", "T2"), np.array([[[1.0, 100.0]]]))
    proto = AcquisitionProtocol(SE, [50.0, 100.0])
    r = 0.25
    clean = forward(kappa.data, proto.tau_ms, SE)
    series = WeightedSeries(proto, clean + [r, 0.0])
    val = nll(kappa, series, LikelihoodContext(proto, 1.0))
    assert val == pytest.approx(r * r / 2.0, rel=1e-12)


def test_nll_matches_bruteforce_sum():
    kappa, series, ctx = _random_case(2)
    tau = ctx.protocol.tau_ms
    total = 0.0
    for i in range(4):
        for j in range(4):
            for n, t in enumerate(tau):
                pred = float(forward_t2(kappa.data[i, j].astype(np.float64), t)[0])
                total += (pred - float(series.data[i, j, n])) ** 2
    total /= 2 * ctx.sigma**2
    assert nll(kappa, series, ctx) == pytest.approx(total, rel=1e-10)


def test_nll_permutation_invariance():
    kappa, series, ctx = _random_case(3)
    tau = ctx.protocol.tau_ms
    perm = np.array([2, 0, 3, 1])
    pred = forward(kappa.data, tau, SE)
    resid = pred - series.data
    direct = float(np.sum(resid**2) / (2 * ctx.sigma**2))
    pred_p = forward(kappa.data, tau[perm], SE)
    resid_p = pred_p - series.data[..., perm]
    permuted = float(np.sum(resid_p**2) / (2 * ctx.sigma**2))
    assert permuted == pytest.approx(direct, rel=1e-12)


def test_nll_grad_zero_at_noiseless():
    kappa, series, ctx = _random_case(4)
    clean = WeightedSeries(
        series.protocol, forward(kappa.data, ctx.protocol.tau_ms, SE)
    )
    grad = nll_grad(kappa, clean, ctx)
    assert np.all(grad == 0.0)


def test_nll_grad_sigma_scaling():
    kappa, series, _ = _random_case(5)
    g1 = nll_grad(kappa, series, LikelihoodContext(series.protocol, 0.05))
    g2 = nll_grad(kappa, series, LikelihoodContext(series.protocol, 0.10))
    assert np.allclose(g1 / 4.0, g2, rtol=1e-12)


def test_nll_grad_matches_finite_differences():
    kappa, series, ctx = _random_case(6)
    grad = nll_grad(kappa, series, ctx)
    data64 = kappa.data.astype(np.float64)
    fd = np.zeros_like(grad)
    for q in range(2):
        h = 1e-6 * np.maximum(np.abs(data64[..., q]), 1.0)
        plus = data64.copy()
        minus = data64.copy()
        plus[..., q] += h
        minus[..., q] -= h
        resid_p = forward(plus, ctx.protocol.tau_ms, SE) - series.data
        resid_m = forward(minus, ctx.protocol.tau_ms, SE) - series.data
        nll_p = np.sum(resid_p**2, axis=-1) / (2 * ctx.sigma**2)
        nll_m = np.sum(resid_m**2, axis=-1) / (2 * ctx.sigma**2)
        fd[..., q] = (nll_p - nll_m) / (2 * h)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
    assert np.max(rel) < 1e-6


def test_nll_shape_mismatch():
    kappa, series, ctx = _random_case(7)
    small = ParameterMap(("A", "T2"), kappa.data[:2, :2])
    with pytest.raises(InvariantError):
        nll(small, series, ctx)


def test_context_requires_sigma():
    proto = AcquisitionProtocol(SE, [10.0, 20.0])
    with pytest.raises(InvariantError):
        LikelihoodContext.from_protocol(proto)
    ctx = LikelihoodContext.from_protocol(proto.with_sigma(0.1))
    assert ctx.sigma == 0.1
