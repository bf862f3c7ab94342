import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fastobq.errors import NonFinite
from fastobq.grid import QuantGrid, fit_grid, quant_error, quantize, quantize_value


def test_symmetric_fit_hand_value():
    g = fit_grid(np.array([[-1.0, 0.5]]), bits=4)
    assert g.scales[0] == pytest.approx(1 / 7, abs=1e-15)
    assert (g.qmin, g.qmax) == (-7, 7)
    assert g.zero_points[0] == 0


def test_half_to_even_tie():
    g = fit_grid(np.array([[-1.0, 0.5]]), bits=4)
    # 0.5 / (1/7) = 3.5 -> 4
    assert quantize_value(0.5, 0, g) == pytest.approx(4 / 7, abs=1e-15)


def test_all_zero_row():
    g = fit_grid(np.zeros((1, 4)), bits=4)
    assert g.scales[0] == 1.0
    assert quantize_value(0.0, 0, g) == 0.0


def test_constant_row_asymmetric_falls_back():
    g = fit_grid(np.full((1, 5), 0.3), bits=4, scheme="asymmetric")
    assert g.scales[0] == pytest.approx(0.3 / 7)
    assert g.qmin <= g.zero_points[0] <= g.qmax
    assert quantize_value(0.3, 0, g) == pytest.approx(0.3, abs=1e-15)


def test_asymmetric_fit():
    g = fit_grid(np.array([[-1.0, 2.0, 0.5]]), bits=4, scheme="asym")
    assert (g.qmin, g.qmax) == (0, 15)
    assert g.scales[0] == pytest.approx(3 / 15)
    assert g.zero_points[0] == 5
    assert quantize_value(-1.0, 0, g) == pytest.approx(-1.0)
    assert quantize_value(2.0, 0, g) == pytest.approx(2.0)


def test_saturation():
    g = fit_grid(np.array([[-1.0, 0.5]]), bits=4)
    assert quantize_value(10.0, 0, g) == pytest.approx(1.0)
    assert quantize_value(-10.0, 0, g) == pytest.approx(-1.0)


def test_on_grid_fixed_point_and_midpoint():
    g = fit_grid(np.array([[-1.0, 0.5]]), bits=4)
    delta = g.scales[0]
    assert quant_error(3 * delta, 0, g) == 0.0
    assert abs(quant_error(delta / 2, 0, g)) == pytest.approx(delta / 2)


def test_per_tensor_granularity():
    W = np.array([[1.0, -0.5], [4.0, 0.1]])
    g = fit_grid(W, bits=3, granularity="tensor")
    np.testing.assert_array_equal(g.scales, [4 / 3, 4 / 3])


def test_nonfinite():
    with pytest.raises(NonFinite):
        fit_grid(np.array([[np.inf, 1.0]]))


def test_vectorized_matches_scalar(rng):
    W = rng.standard_normal((5, 9))
    for scheme in ("symmetric", "asymmetric"):
        g = fit_grid(W, 3, scheme)
        Q = quantize(W * 1.3, g)
        for i in range(5):
            for j in range(9):
                assert Q[i, j] == quantize_value(W[i, j] * 1.3, i, g)


def test_serialization_roundtrip(rng):
    g = fit_grid(rng.standard_normal((4, 6)), 5, "asymmetric")
    back = QuantGrid.from_dict(g.to_dict())
    np.testing.assert_array_equal(back.scales, g.scales)
    np.testing.assert_array_equal(back.zero_points, g.zero_points)
    assert (back.bits, back.scheme, back.qmin, back.qmax) == (g.bits, g.scheme, g.qmin, g.qmax)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
rows_strategy = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)), elements=finite)


@settings(max_examples=200, deadline=None)
@given(W=rows_strategy, bits=st.integers(2, 8), scheme=st.sampled_from(["symmetric", "asymmetric"]))
def test_grid_properties(W, bits, scheme):
    g = fit_grid(W, bits, scheme)
    assert np.all(g.scales > 0)
    Q = quantize(W, g)
    # idempotent
    np.testing.assert_array_equal(quantize(Q, g), Q)
    # within half a step for values inside the representable range
    lo = g.scales[:, None] * (g.qmin - g.zero_points[:, None])
    hi = g.scales[:, None] * (g.qmax - g.zero_points[:, None])
    inside = (W >= lo) & (W <= hi)
    bound = g.scales[:, None] / 2 * (1 + 1e-12) + 1e-12
    assert np.all(np.abs(Q - W)[inside] <= np.broadcast_to(bound, W.shape)[inside])


@settings(max_examples=200, deadline=None)
@given(a=finite, b=finite, bits=st.integers(2, 8), scheme=st.sampled_from(["symmetric", "asymmetric"]))
def test_monotone(a, b, bits, scheme):
    g = fit_grid(np.array([[-3.0, 1.0, 7.0]]), bits, scheme)
    lo, hi = min(a, b), max(a, b)
    assert quantize_value(lo, 0, g) <= quantize_value(hi, 0, g)


def test_error_bound_sweep(rng):
    W = rng.standard_normal((8, 64))
    g = fit_grid(W, 4)
    samples = rng.uniform(-1, 1, size=(8, 1000)) * (g.scales * g.qmax)[:, None]
    err = np.abs(quantize(samples, g) - samples)
    assert np.all(err <= g.scales[:, None] / 2 + 1e-15)
