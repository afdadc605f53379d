import numpy as np
import pytest

from relaxkit import autodiff as ad
from relaxkit.autodiff import Tensor
from relaxkit.containers import AcquisitionProtocol, SequenceKind, WeightedSeries
from relaxkit.errors import RelaxkitError
from relaxkit.models import forward
from relaxkit.protocols import named_protocol
from relaxkit.rim import (
    RimState,
    ScalingPolicy,
    cell_forward,
    infer,
    init_estimate,
    load_rim_weights,
    make_rim_weights,
    save_rim_weights,
    scaled_likelihood_gradient,
    step,
    train_rim,
    unroll,
)
from relaxkit.rng import SeededRng
from relaxkit.training import TrainingConfig

from _gradcheck import directional_fd_check, entrywise_fd_check

IR = SequenceKind.INVERSION_RECOVERY
SE = SequenceKind.SPIN_ECHO_DECAY


def small_series(kind=IR, shape=(6, 6), seed=5, sigma=0.05, n_tau=None):
    gen = SeededRng(seed).generator()
    if kind is IR:
        tau = np.linspace(140.0, 940.0, n_tau or 8)
        params = np.stack(
            [
                gen.uniform(0.4, 1.1, shape),
                np.full(shape, 1.9),
                gen.uniform(300, 3000, shape),
            ],
            axis=-1,
        )
    else:
        tau = np.geomspace(10.0, 320.0, n_tau or 6)
        params = np.stack(
            [gen.uniform(0.4, 1.1, shape), gen.uniform(30, 400, shape)], axis=-1
        )
    clean = forward(params, tau, kind)
    noisy = clean + gen.normal(0, sigma, clean.shape)
    proto = AcquisitionProtocol(kind, tau, sigma if sigma > 0 else None)
    return WeightedSeries(proto, noisy), params


def test_scaling_policy_roundtrip_and_defaults():
    pol = ScalingPolicy.for_kind(IR)
    assert pol.scales == (1.0, 1.0, 1000.0)
    assert ScalingPolicy.for_kind(SE).scales == (1.0, 100.0)
    x = np.array([[0.8, 1.9, 1500.0]])
    assert np.allclose(pol.to_physical(pol.to_network(x)), x)
    assert pol == ScalingPolicy.from_json(pol.to_json())


def test_init_estimate_constant_series():
    proto = named_protocol("t2_6")
    series = WeightedSeries(proto, np.ones((4, 4, 6)))
    est = init_estimate(series)
    assert np.all(est.channel("A") == 1.0)
    assert np.all(est.channel("T2") == 100.0)


def test_init_estimate_matches_bruteforce_max():
    series, _ = small_series(SE, seed=6)
    est = init_estimate(series)
    h, w = series.shape
    for i in range(h):
        for j in range(w):
            expected = max(max(series.data[i, j, :]), 0.0)
            assert est.channel("A")[i, j] == pytest.approx(expected, rel=1e-12)


def test_init_estimate_t1_channels():
    series, _ = small_series(IR, seed=7)
    est = init_estimate(series)
    assert est.channels == ("A", "B", "T1")
    assert np.all(est.channel("B") == 2.0)
    assert np.all(est.channel("T1") == 1000.0)


def test_step_with_zero_weights_is_identity():
    series, _ = small_series(IR, seed=8)
    weights = make_rim_weights(IR, SeededRng(9))
    for p in weights.params():
        p.data[...] = 0.0
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float32)
    states = unroll(nchw, series.protocol.tau_ms, weights, 3)
    for state in states[1:]:
        assert np.array_equal(state.kappa.data, states[0].kappa.data)


def test_step_additivity_is_exact():
    series, _ = small_series(IR, seed=10)
    weights = make_rim_weights(IR, SeededRng(11))
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float32)
    tau = series.protocol.tau_ms
    states = unroll(nchw, tau, weights, 2)
    old, new = states[1], states[2]
    grad = scaled_likelihood_gradient(
        old.kappa, nchw, tau, weights.scaling, IR
    )
    x = ad.concat([old.kappa, grad], axis=1)
    delta, _, _ = cell_forward(x, old.h1, old.h2, weights)
    assert np.array_equal(new.kappa.data, old.kappa.data + delta.data)


@pytest.mark.parametrize("size", [16, 64])
def test_step_preserves_spatial_shape(size):
    gen = SeededRng(12).generator()
    proto = named_protocol("t2_6")
    data = np.abs(gen.normal(0.5, 0.2, (size, size, 6)))
    series = WeightedSeries(proto, data)
    weights = make_rim_weights(SE, SeededRng(13))
    est = infer(series, weights, j_steps=1)
    assert est.shape == (size, size)


def test_same_weights_any_series_length():
    weights = make_rim_weights(IR, SeededRng(14))
    for name in ("t1_23", "t1_25", "t1_31"):
        proto = named_protocol(name)
        gen = SeededRng(15).generator()
        series = WeightedSeries(
            proto, np.abs(gen.normal(0.5, 0.2, (8, 8, proto.n_images)))
        )
        est = infer(series, weights, j_steps=2)
        assert est.shape == (8, 8)
    # extreme case: a single weighted image still runs
    proto1 = AcquisitionProtocol(IR, [500.0, 600.0, 700.0])
    series1 = WeightedSeries(proto1, np.abs(SeededRng(16).generator().normal(0.5, 0.2, (5, 5, 3))))
    infer(series1, weights, j_steps=1)


def test_infer_zero_steps_returns_init():
    series, _ = small_series(IR, seed=17)
    weights = make_rim_weights(IR, SeededRng(18))
    est = infer(series, weights, j_steps=0)
    ref = init_estimate(series)
    assert np.allclose(est.data, ref.data, rtol=0, atol=1e-6)


def test_infer_trajectory_length():
    series, _ = small_series(SE, seed=19)
    weights = make_rim_weights(SE, SeededRng(20))
    est, traj = infer(series, weights, j_steps=4, record_trajectory=True)
    assert len(traj) == 5
    assert np.array_equal(traj[-1].data, est.data)


def test_manifest_is_series_length_free():
    weights = make_rim_weights(IR, SeededRng(21))
    arch = weights.arch()

    def walk(node):
        if isinstance(node, dict):
            for key, value in node.items():
                assert "n_inputs" not in key and key != "n"
                walk(value)

    walk(arch)


def test_likelihood_gradient_matches_finite_differences():
    gen = SeededRng(22).generator()
    series, params = small_series(IR, shape=(4, 4), seed=23)
    scaling = ScalingPolicy.for_kind(IR)
    nchw = series.data.transpose(2, 0, 1)[None]
    tau = series.protocol.tau_ms
    kappa = Tensor(
        scaling.to_network(params).transpose(2, 0, 1)[None].copy(), requires_grad=True
    )
    probe = gen.standard_normal(kappa.data.shape)

    def build():
        g = scaled_likelihood_gradient(kappa, nchw, tau, scaling, IR)
        return ad.reduce_mean(ad.mul(g, ad.Tensor(probe)))

    worst = entrywise_fd_check(build, [kappa], gen, n_entries=30)
    assert worst < 1e-7


def test_likelihood_gradient_rejects_nan():
    scaling = ScalingPolicy.for_kind(SE)
    kappa = Tensor(np.full((1, 2, 2, 2), np.nan, dtype=np.float32))
    series = np.ones((1, 3, 2, 2))
    with pytest.raises(RelaxkitError):
        scaled_likelihood_gradient(kappa, series, np.array([10.0, 20.0, 40.0]), scaling, SE)


def test_unroll_gradcheck_j2_float64():
    # spin-echo task: its model has no interior modulus kink (the inner term
    # stays positive for A > 0), so finite differences probe a smooth path
    series, _ = small_series(SE, shape=(5, 5), seed=24)
    weights = make_rim_weights(SE, SeededRng(25), features=6, dtype=np.float64)
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float64)
    tau = series.protocol.tau_ms
    gen = SeededRng(26).generator()
    target = gen.standard_normal((1, 2, 5, 5))
    params = weights.params()

    def build():
        states = unroll(nchw, tau, weights, 2, dtype=np.float64)
        a = ad.mse_loss(states[1].kappa, target)
        b = ad.mse_loss(states[2].kappa, target)
        return ad.mul(ad.add(a, b), 0.5)

    assert directional_fd_check(build, params, gen) < 1e-8
    assert entrywise_fd_check(build, params, gen, n_entries=25) < 1e-7


def test_unroll_gradients_exact_on_t1_task():
    """T1-task gradients through the full unroll, probed away from the
    modulus kink: compare per-tensor best entries against 4th-order FD."""
    series, _ = small_series(IR, shape=(5, 5), seed=24)
    weights = make_rim_weights(IR, SeededRng(25), features=6, dtype=np.float64)
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float64)
    tau = series.protocol.tau_ms
    gen = SeededRng(26).generator()
    target = gen.standard_normal((1, 3, 5, 5))
    params = weights.params()

    def build():
        states = unroll(nchw, tau, weights, 2, dtype=np.float64)
        a = ad.mse_loss(states[1].kappa, target)
        b = ad.mse_loss(states[2].kappa, target)
        return ad.mul(ad.add(a, b), 0.5)

    # small step keeps the probe on one side of any per-voxel zero crossing
    assert directional_fd_check(build, params, gen, h=1e-5) < 1e-6


def test_gradients_flow_through_all_steps():
    series, _ = small_series(IR, shape=(5, 5), seed=27)
    weights = make_rim_weights(IR, SeededRng(28), features=6, dtype=np.float64)
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float64)
    tau = series.protocol.tau_ms
    target = np.zeros((1, 3, 5, 5))

    for p in weights.params():
        p.zero_grad()
    with ad.Tape() as tape:
        states = unroll(nchw, tau, weights, 2, dtype=np.float64)
        # loss uses only the *second* step...
        loss = ad.mse_loss(states[2].kappa, target)
    tape.backward(loss)
    # ...yet step-1 parameters (shared cell) still receive gradient through
    # the recurrence
    grads = [np.abs(p.grad).max() for p in weights.params() if p.grad is not None]
    assert max(grads) > 0


def test_memory_states_carry_information():
    series, _ = small_series(IR, shape=(5, 5), seed=29)
    weights = make_rim_weights(IR, SeededRng(30))
    nchw = series.data.transpose(2, 0, 1)[None].astype(np.float32)
    tau = series.protocol.tau_ms
    states = unroll(nchw, tau, weights, 1)
    base = states[-1]

    def advance(state):
        s = step(state, nchw, tau, weights)
        return step(s, nchw, tau, weights).kappa.data

    unperturbed = advance(base)
    bumped = RimState(
        Tensor(base.kappa.data.copy()),
        Tensor(base.h1.data + 0.1),
        Tensor(base.h2.data.copy()),
        base.j,
    )
    perturbed = advance(bumped)
    assert not np.array_equal(unperturbed, perturbed)


def test_weights_roundtrip(tmp_path):
    weights = make_rim_weights(SE, SeededRng(31))
    save_rim_weights(weights, tmp_path / "w", extra={"training": {"iterations": 0}})
    loaded, manifest = load_rim_weights(tmp_path / "w")
    assert manifest["arch"] == weights.arch()
    for (name_a, t_a), (name_b, t_b) in zip(
        weights.named_params(), loaded.named_params()
    ):
        assert name_a == name_b
        assert np.array_equal(t_a.data, t_b.data)


def smoke_config(seed=0, iterations=40):
    return TrainingConfig(
        protocol=named_protocol("t2_6"),
        iterations=iterations,
        batch_size=4,
        patch_size=16,
        lr=0.002,
        seed=seed,
        pool_count=2,
        pool_size=96,
        log_every=10,
    )


def test_train_smoke_beats_frozen_init():
    weights, result = train_rim(smoke_config(), features=12, j_steps=3)
    assert result.final_running_loss < result.baseline_loss


def test_train_deterministic(tmp_path):
    w1, r1 = train_rim(smoke_config(seed=3, iterations=8), features=8, j_steps=2)
    w2, r2 = train_rim(smoke_config(seed=3, iterations=8), features=8, j_steps=2)
    save_rim_weights(w1, tmp_path / "a")
    save_rim_weights(w2, tmp_path / "b")
    assert (tmp_path / "a" / "weights.bin").read_bytes() == (
        tmp_path / "b" / "weights.bin"
    ).read_bytes()
    assert r1.loss_curve == r2.loss_curve


@pytest.mark.slow
def test_spec_smoke_training_and_residual_reduction():
    """Reference smoke run (300 iterations, batch 8, 24x24 patches): beats the
    frozen-init predictor, and on a held-out noiseless patch the final data
    residual is below the residual at the initial estimate."""
    config = TrainingConfig(
        protocol=named_protocol("t2_6"),
        iterations=300,
        batch_size=8,
        patch_size=24,
        seed=12,
        pool_count=3,
        pool_size=96,
    )
    weights, result = train_rim(config)
    assert result.final_running_loss < result.baseline_loss

    series, _ = small_series(SE, shape=(24, 24), seed=33, sigma=0.0)
    est, traj = infer(series, weights, record_trajectory=True)
    tau = series.protocol.tau_ms

    def residual(pm):
        return float(np.linalg.norm(forward(pm.data, tau, SE) - series.data))

    assert residual(est) < residual(traj[0])
