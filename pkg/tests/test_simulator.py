import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from analogsize.circuits import BENCHMARKS, NOMINAL_CORNER, PvtCorner, build_benchmark, random_params
from analogsize.errors import ConfigError, EvaluationError
from analogsize.simulator import (
    CONSTANTS, QUANTITIES, VTH0_N, VTH0_P, ParasiticModel, SpecMatrix, _pm, apply_parasitics, corner_modifiers, evaluate,
    evaluate_all_corners, evaluate_batch,
)


def test_nominal_corner_mobility_close_to_one():
    m = corner_modifiers(NOMINAL_CORNER)
    assert abs(m.mobility_scale_n - 1.0) < 0.01
    assert abs(m.mobility_scale_p - 1.0) < 0.01


def test_ff_cold_corner_mobility_formula():
    m = corner_modifiers(PvtCorner.from_code("FF", 1.3, -40.0))
    assert m.mobility_scale_n == pytest.approx(1.10 * (233.15 / 300.0) ** -1.5, rel=1e-12)
    assert m.vdd == 1.3


def test_sf_corner_uses_slow_n_fast_p():
    m = corner_modifiers(PvtCorner.from_code("SF", 1.1, 125.0))
    tfac = (398.15 / 300.0) ** -1.5
    assert m.mobility_scale_n == pytest.approx(0.90 * tfac)
    assert m.mobility_scale_p == pytest.approx(1.10 * tfac)
    # slow N raises its threshold by 10%, fast P lowers its own by 10%
    assert m.vth_shift_n - m.vth_shift_p == pytest.approx(0.1 * VTH0_N + 0.1 * VTH0_P, abs=1e-12)


def test_gbw_hand_value_and_pm_45():
    # GBW = gm / (2 pi Cc)
    gm, cc = 6.283e-6, 1e-12
    assert gm / (2 * math.pi * cc) == pytest.approx(1.0e6, rel=1e-3)
    assert _pm(1e6, 1e6) == pytest.approx(45.0, abs=1e-12)


@pytest.mark.parametrize("name", BENCHMARKS)
def test_shapes_and_positivity(name):
    b = build_benchmark(name)
    X = random_params(b.graph, np.random.default_rng(0), 20)
    out = evaluate_batch(b, X, b.corners)
    assert out.shape == (20, len(QUANTITIES), 16)
    assert np.all(np.isfinite(out))
    assert np.all(out[:, QUANTITIES.index("bandwidth")] > 0)
    assert np.all(out[:, QUANTITIES.index("power")] > 0)
    sm = evaluate_all_corners(b, X[0], b.corners)
    assert sm.select(b.spec_names).shape == (4, 16)


@pytest.mark.parametrize("name", BENCHMARKS)
def test_all_corners_equals_stacked_single_corner_calls(name):
    b = build_benchmark(name)
    x = random_params(b.graph, np.random.default_rng(1))
    sm = evaluate_all_corners(b, x, b.corners)
    cols = np.stack([evaluate(b, x, c).values for c in b.corners], axis=1)
    assert np.array_equal(sm.values, cols)


def test_threaded_evaluation_matches_serial(monkeypatch):
    b = build_benchmark("nmcf")
    x = random_params(b.graph, np.random.default_rng(2))
    serial = evaluate_all_corners(b, x, b.corners).values
    monkeypatch.setenv("ANALOGSIZE_THREADS", "4")
    assert np.array_equal(evaluate_all_corners(b, x, b.corners).values, serial)


def test_batch_equals_single_rows():
    b = build_benchmark("two_stage")
    X = random_params(b.graph, np.random.default_rng(3), 9)
    batch = evaluate_batch(b, X, b.corners)
    for i, x in enumerate(X):
        assert np.array_equal(batch[i], evaluate_batch(b, x[None], b.corners)[0])


def test_doubling_bias_widths_doubles_power_two_stage():
    b = build_benchmark("two_stage")
    g = b.graph
    x = g.midpoint().copy()
    names = g.param_names
    for n in ("mn2.w", "mn3.w"):
        x[names.index(n)] = 20000
    y = x.copy()
    for n in ("mn2.w", "mn3.w"):
        y[names.index(n)] = 40000
    p1 = evaluate_all_corners(b, x, b.corners).row("power")
    p2 = evaluate_all_corners(b, y, b.corners).row("power")
    np.testing.assert_allclose(p2, 2 * p1, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_in_cc_and_tail(seed):
    b = build_benchmark("two_stage")
    g = b.graph
    names = g.param_names
    x = random_params(g, np.random.default_rng(seed))
    ic, it = names.index("c.c"), names.index("mn2.w")
    if x[ic] < g.upper()[ic]:
        y = x.copy()
        y[ic] = round(x[ic] + 0.1, 10)
        assert np.all(evaluate_batch(b, y[None], b.corners)[0, QUANTITIES.index("gbw")]
                      < evaluate_batch(b, x[None], b.corners)[0, QUANTITIES.index("gbw")])
    if x[it] < g.upper()[it]:
        y = x.copy()
        y[it] = x[it] + 1000
        assert np.all(evaluate_batch(b, y[None], b.corners)[0, QUANTITIES.index("power")]
                      > evaluate_batch(b, x[None], b.corners)[0, QUANTITIES.index("power")])


@pytest.mark.parametrize("name", BENCHMARKS)
def test_corner_columns_distinct_and_pure(name):
    b = build_benchmark(name)
    x = random_params(b.graph, np.random.default_rng(4))
    v = evaluate_all_corners(b, x, b.corners).values
    assert len({v[:, j].tobytes() for j in range(16)}) == 16
    assert np.array_equal(v, evaluate_all_corners(b, x, b.corners).values)


def test_nonfinite_raises_evaluation_error_with_node():
    b = build_benchmark("two_stage")
    X = b.graph.midpoint()[None].copy()
    X[0, b.graph.param_names.index("mn2.w")] = 0.0  # zero tail current
    with pytest.raises(EvaluationError) as e:
        evaluate_batch(b, X, b.corners)
    assert e.value.node == "mn2"


def test_parasitics_identity_at_zero_beta():
    b = build_benchmark("two_stage")
    x = b.graph.midpoint()
    sm = evaluate_all_corners(b, x, b.corners)
    m = ParasiticModel(beta={"gain": 0.0, "bandwidth": 0.0, "phase_margin": 0.0}, beta_power=0.0)
    assert np.array_equal(apply_parasitics(m, b.graph, x, sm).values, sm.values)


def test_parasitic_bandwidth_hand_value():
    b = build_benchmark("two_stage")
    g = b.graph
    x = g.upper()  # every width at its bound gives load 1
    m = ParasiticModel()
    assert m.load(g, x) == 1.0
    spec = SpecMatrix(np.ones((len(QUANTITIES), 1)) * 1e6)
    post = apply_parasitics(m, g, x, spec)
    assert post.row("bandwidth")[0] == pytest.approx(0.9e6, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parasitics_never_improve(seed):
    b = build_benchmark("two_stage")
    rng = np.random.default_rng(seed)
    x = random_params(b.graph, rng)
    sm = evaluate_all_corners(b, x, b.corners)
    post = apply_parasitics(ParasiticModel(), b.graph, x, sm)
    for q in ("gain", "bandwidth", "phase_margin", "gbw"):
        assert np.all(post.row(q) <= sm.row(q))
    assert np.all(post.row("power") > sm.row("power"))


def test_parasitic_beta_out_of_range():
    with pytest.raises(ConfigError):
        ParasiticModel(beta={"gain": 0.5})


@pytest.mark.parametrize("name", BENCHMARKS)
def test_constants_table_complete(name):
    assert {"mu_n", "mu_p", "L", "lam", "vh"} <= set(CONSTANTS[name])
