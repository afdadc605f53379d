import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaxkit.containers import ParameterMap, SequenceKind
from relaxkit.errors import InvariantError
from relaxkit.metrics import (
    EvalReport,
    RepeatedEstimates,
    StructureSpec,
    blurriness_experiment,
    box_stats,
    cv,
    default_structures,
    identity_estimator,
    inject_structures,
    load_report,
    monte_carlo,
    relative_bias,
    save_report,
    sigmoid_fit,
)
from relaxkit.protocols import named_protocol
from relaxkit.rng import SeededRng
from relaxkit.simulate import (
    NoiseConfig,
    TissuePriorTable,
    make_procedural_labelmap,
    sample_parameter_map,
)

SE = SequenceKind.SPIN_ECHO_DECAY
IR = SequenceKind.INVERSION_RECOVERY


def make_maps(seed=0, c=3, shape=(4, 4), spread=0.1):
    gen = SeededRng(seed).generator()
    gt_data = np.stack(
        [gen.uniform(0.5, 1.0, shape), gen.uniform(50, 300, shape)], axis=-1
    )
    gt = ParameterMap(("A", "T2"), gt_data)
    ests = tuple(
        ParameterMap(("A", "T2"), gt_data * (1.0 + gen.uniform(-spread, spread, gt_data.shape)))
        for _ in range(c)
    )
    return gt, ests


def test_bias_zero_when_estimates_equal_truth():
    gt, _ = make_maps()
    rep = RepeatedEstimates((gt, gt, gt), gt)
    assert np.all(relative_bias(rep) == 0.0)


def test_bias_ten_percent():
    gt, _ = make_maps(1)
    scaled = ParameterMap(gt.channels, gt.data * 1.1)
    rep = RepeatedEstimates((scaled, scaled), gt)
    assert np.allclose(relative_bias(rep), 10.0, rtol=1e-10)


def test_bias_matches_bruteforce_loop():
    gt, ests = make_maps(2, c=3)
    rep = RepeatedEstimates(ests, gt)
    bias = relative_bias(rep)
    h, w, q = gt.data.shape
    for i in range(h):
        for j in range(w):
            for k in range(q):
                acc = 0.0
                for est in ests:
                    acc += (est.data[i, j, k] - gt.data[i, j, k]) / gt.data[i, j, k]
                expected = acc / len(ests) * 100.0
                assert bias[i, j, k] == pytest.approx(expected, abs=1e-12)


def test_cv_identical_estimates_is_zero():
    gt, _ = make_maps(3)
    rep = RepeatedEstimates((gt, gt, gt))
    assert np.allclose(cv(rep), 0.0, atol=1e-12)


def test_cv_two_point_population_sd():
    a = ParameterMap(("A", "T2"), np.full((1, 1, 2), [1.0, 90.0]))
    b = ParameterMap(("A", "T2"), np.full((1, 1, 2), [1.0, 110.0]))
    rep = RepeatedEstimates((a, b))
    # population SD of {90, 110} is 10, mean 100 -> 10%
    assert cv(rep)[0, 0, 1] == pytest.approx(10.0, rel=1e-12)


def test_cv_matches_bruteforce_loop():
    gt, ests = make_maps(4, c=4)
    rep = RepeatedEstimates(ests)
    field = cv(rep)
    h, w, q = gt.data.shape
    for i in range(h):
        for j in range(w):
            for k in range(q):
                vals = [est.data[i, j, k] for est in ests]
                mean = sum(vals) / len(vals)
                var = sum((v - mean) ** 2 for v in vals) / len(vals)
                expected = np.sqrt(var) / mean * 100.0
                assert field[i, j, k] == pytest.approx(expected, abs=1e-12)


def test_cv_requires_two():
    gt, _ = make_maps(5)
    with pytest.raises(InvariantError):
        cv(RepeatedEstimates((gt,)))


def test_bias_requires_nonzero_truth_in_mask():
    data = np.full((2, 2, 2), [0.0, 100.0])
    gt = ParameterMap(("A", "T2"), data)
    rep = RepeatedEstimates((gt, gt), gt, mask=np.ones((2, 2), bool))
    with pytest.raises(InvariantError):
        relative_bias(rep)


@given(st.permutations(list(range(4))))
@settings(max_examples=20, deadline=None)
def test_bias_and_cv_invariant_under_permutation(perm):
    gt, ests = make_maps(6, c=4)
    rep_a = RepeatedEstimates(ests, gt)
    rep_b = RepeatedEstimates(tuple(ests[i] for i in perm), gt)
    # summation order changes only the last floating-point bits
    assert np.allclose(relative_bias(rep_a), relative_bias(rep_b), rtol=1e-12, atol=1e-12)
    assert np.allclose(cv(rep_a), cv(rep_b), rtol=1e-12, atol=1e-12)


@given(st.floats(min_value=0.1, max_value=50.0))
@settings(max_examples=20, deadline=None)
def test_cv_invariant_under_global_scaling(scale):
    _, ests = make_maps(7, c=3)
    rep_a = RepeatedEstimates(ests)
    scaled = tuple(ParameterMap(e.channels, e.data * scale) for e in ests)
    rep_b = RepeatedEstimates(scaled)
    assert np.allclose(cv(rep_a), cv(rep_b), rtol=1e-9, atol=1e-9)


def phantom_t1_map(size=64, seed=11):
    labels = make_procedural_labelmap(size, SeededRng(seed))
    kappa = sample_parameter_map(
        labels, TissuePriorTable(), NoiseConfig(), SeededRng(seed + 1), IR
    )
    return labels, kappa


def test_monte_carlo_identity_estimator_zero_error():
    labels, gt = phantom_t1_map()
    proto = named_protocol("t1_31")
    report = monte_carlo(
        gt, proto, [10.0, 30.0], 3, identity_estimator(gt), SeededRng(12),
        estimator_name="identity",
    )
    for row in report.tables["bias_stats"]:
        assert row["median"] == 0.0 and row["min"] == 0.0 and row["max"] == 0.0
    for row in report.tables["cv_stats"]:  # identical estimates: zero up to rounding
        assert abs(row["median"]) < 1e-12 and abs(row["max"]) < 1e-12


def test_monte_carlo_reproducible_across_workers():
    labels, gt = phantom_t1_map(seed=13)
    proto = named_protocol("t1_31")

    def noisy_identity(series):
        # estimator whose output depends on the data, exercising realization rng
        bump = float(series.data.mean()) * 1e-3
        return ParameterMap(gt.channels, gt.data * (1.0 + bump), gt.mask)

    r1 = monte_carlo(gt, proto, [10.0], 6, noisy_identity, SeededRng(14), workers=1)
    r8 = monte_carlo(gt, proto, [10.0], 6, noisy_identity, SeededRng(14), workers=8)
    assert r1.to_json() == r8.to_json()


def test_report_roundtrip(tmp_path):
    report = EvalReport(
        kind="monte_carlo",
        config={"snr_list": [5.0]},
        tables={"bias_stats": [{"estimator": "x", "snr": 5.0, "channel": "A",
                                "median": 0.1, "q1": 0.0, "q3": 0.2, "min": -1.0,
                                "max": 1.0}]},
        scalars={"failures": {}},
    )
    save_report(report, tmp_path)
    back = load_report(tmp_path)
    assert back.to_json() == report.to_json()
    assert (tmp_path / "bias_stats.csv").exists()


def test_default_structures_configuration():
    labels, _ = phantom_t1_map(size=64, seed=15)
    specs = default_structures(labels)
    names = [s.name for s in specs]
    assert names == ["point_hypo", "point_hyper", "line_vert", "line_horz"]
    overrides = {s.name: s.override_t1_ms for s in specs}
    assert overrides["point_hypo"] == 400.0
    assert overrides["point_hyper"] == 1200.0
    assert overrides["line_vert"] == 1200.0 and overrides["line_horz"] == 1200.0
    for s in specs:
        assert len(s.neighborhood) > 0
        assert not set(s.pixels) & set(s.neighborhood)
    # anchors land in the intended tissues
    legend_inv = {n: v for v, n in labels.legend.items()}
    r, c = specs[0].pixels[0]
    assert labels.labels[r, c] == legend_inv["gray_matter"]
    r, c = specs[1].pixels[0]
    assert labels.labels[r, c] == legend_inv["white_matter"]


def test_inject_structures_overrides_t1_only():
    labels, gt = phantom_t1_map(size=64, seed=16)
    specs = default_structures(labels)
    e2 = inject_structures(gt, specs)
    t_idx = gt.channels.index("T1")
    r, c = specs[0].pixels[0]
    assert e2.data[r, c, t_idx] == 400.0
    assert np.array_equal(e2.data[..., 0], gt.data[..., 0])  # A untouched
    untouched = gt.data[..., t_idx].copy()
    for s in specs:
        for r, c in s.pixels:
            untouched[r, c] = e2.data[r, c, t_idx]
    assert np.array_equal(e2.data[..., t_idx], untouched)


def test_blurriness_identity_estimator():
    labels, gt = phantom_t1_map(size=64, seed=17)
    specs = default_structures(labels)
    proto = named_protocol("t1_31")

    # the identity hook must track each scenario's own ground truth
    scenario_maps = {id(gt): gt}

    def estimator_for(gt_map):
        return identity_estimator(gt_map)

    estimators = {"identity": None}

    # run manually: E1 and E2 both with their own identity estimator is what
    # blurriness_experiment does when the estimator returns the truth; emulate
    # by a data-independent estimator that reconstructs from the series mean
    report = blurriness_experiment(
        gt, specs, 3, 10.0, {"identity": identity_estimator(gt)}, proto, SeededRng(18)
    )
    rows = [
        r
        for r in report.tables["region_stats"]
        if r["scenario"] == "E1" and r["region"] == "structure"
    ]
    assert all(r["bias_median"] == 0.0 for r in rows)
    assert all("p_value" in r for r in report.tables["t_tests"])


def test_blurriness_equal_scenarios_p_value_one():
    labels, gt = phantom_t1_map(size=64, seed=19)
    # structures whose override equals the current value: E1 == E2 exactly
    specs = default_structures(labels)
    t_idx = gt.channels.index("T1")
    same = []
    for s in specs:
        data = gt.data
        same.append(
            StructureSpec(
                s.name,
                s.pixels,
                float(data[s.pixels[0][0], s.pixels[0][1], t_idx]),
                s.neighborhood,
            )
        )
    # single-pixel structures keep their own value; lines get the first pixel's
    # value, so restrict to the two points for exactness
    specs = same[:2]
    proto = named_protocol("t1_31")
    report = blurriness_experiment(
        gt, specs, 3, 10.0, {"identity": identity_estimator(gt)}, proto, SeededRng(20)
    )
    for row in report.tables["t_tests"]:
        assert row["p_value"] == 1.0


def test_structure_disjointness_enforced():
    with pytest.raises(InvariantError):
        StructureSpec("x", ((1, 1),), 400.0, ((1, 1), (1, 2)))


def test_sigmoid_recovers_parameters():
    x = np.linspace(0.0, 10.0, 30)
    true = (600.0, 2.0, 5.0, 800.0)
    y = true[0] / (1.0 + np.exp(-true[1] * (x - true[2]))) + true[3]
    fit = sigmoid_fit(y, x)
    assert fit.ok
    for got, want in zip(
        (fit.amplitude, fit.slope, fit.center, fit.offset), true
    ):
        assert got == pytest.approx(want, rel=1e-6)


def test_sigmoid_mirror_negates_slope():
    x = np.linspace(0.0, 10.0, 25)
    y = 300.0 / (1.0 + np.exp(-1.5 * (x - 4.0))) + 100.0
    fwd = sigmoid_fit(y)
    rev = sigmoid_fit(y[::-1])
    assert fwd.ok and rev.ok
    assert rev.slope == pytest.approx(-fwd.slope, rel=1e-5)
    assert abs(rev.slope) == pytest.approx(abs(fwd.slope), rel=1e-5)


def test_sigmoid_offset_shift():
    x = np.linspace(0.0, 12.0, 24)
    y = 500.0 / (1.0 + np.exp(-0.9 * (x - 6.0))) + 200.0
    base = sigmoid_fit(y, x)
    shifted = sigmoid_fit(y + 100.0, x)
    assert shifted.offset == pytest.approx(base.offset + 100.0, rel=1e-6)
    assert shifted.slope == pytest.approx(base.slope, rel=1e-6)


def test_sigmoid_degenerate_profile_flagged():
    fit = sigmoid_fit(np.full(10, 7.0))
    assert not fit.ok
    assert np.isnan(fit.slope)


def test_sigmoid_needs_six_samples():
    with pytest.raises(InvariantError):
        sigmoid_fit([1.0, 2.0, 3.0])


def test_box_stats_values():
    stats_ = box_stats(np.array([1.0, 2.0, 3.0, 4.0, np.nan]))
    assert stats_["median"] == 2.5
    assert stats_["min"] == 1.0 and stats_["max"] == 4.0
