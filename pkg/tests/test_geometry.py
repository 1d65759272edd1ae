import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmap_dn.errors import OrderExceededError, SingularMetricError
from harmap_dn.geometry import (ConformalTestCase, MetricField, TargetMetric,
                                metric_jet_from_christoffel_jet)


def _families():
    return [
        TargetMetric.conformal(2, "0.3*y1 - 0.2*y2 + 0.4*y1*y2"),
        TargetMetric.polynomial_perturbation(2, 0.5, [["y1*y2", "y1^2"], ["y1^2", "y2^2 + y1"]]),
        TargetMetric.from_expressions([["1 + y1^2", "0.1*y2", "0"], ["0.1*y2", "2", "y1*y3"],
                                       ["0", "y1*y3", "1 + exp(y3)"]]),
    ]


def test_euclidean_christoffels_vanish():
    h = TargetMetric.euclidean(3)
    for t in h.christoffel_jet(np.array([0.3, -0.1, 0.2]), 2):
        assert np.all(t == 0)


@pytest.mark.parametrize("h", _families())
def test_christoffel_matches_finite_difference_of_metric(h):
    y = np.array([0.1, 0.2, -0.3])[: h.n]
    eps = 1e-6
    dh = np.zeros((h.n,) * 3)
    for l in range(h.n):
        e = np.zeros(h.n)
        e[l] = eps
        dh[:, :, l] = (h.metric(y + e) - h.metric(y - e)) / (2 * eps)
    hinv = np.linalg.inv(h.metric(y))
    ref = 0.5 * np.einsum("il,ljk->ijk", hinv, _lower(dh))
    assert np.allclose(h.christoffel(y), ref, atol=1e-8)


def _lower(dh):
    # Γ_{l j k} = ∂_j h_lk + ∂_k h_lj - ∂_l h_jk with dh[a, b, c] = ∂_c h_ab
    return dh.transpose(0, 2, 1) + dh - dh.transpose(2, 0, 1)


@pytest.mark.parametrize("h", _families())
def test_christoffel_derivative_matches_finite_difference(h):
    y = np.array([0.1, 0.2, -0.3])[: h.n]
    eps = 1e-6
    d = h.christoffel_derivative(y)
    for l in range(h.n):
        e = np.zeros(h.n)
        e[l] = eps
        fd = (h.christoffel(y + e) - h.christoffel(y - e)) / (2 * eps)
        assert np.allclose(d[..., l], fd, atol=1e-7)


_POLY = _families()[1]


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_christoffel_lower_index_symmetry(a, b):
    jet = _POLY.christoffel_jet(np.array([a, b]), 2)
    assert np.allclose(jet[0], jet[0].transpose(0, 2, 1))
    assert np.allclose(jet[1], jet[1].transpose(0, 2, 1, 3))
    assert np.allclose(jet[2], jet[2].transpose(0, 1, 2, 4, 3))


@pytest.mark.parametrize("h", _families())
@pytest.mark.parametrize("order", [0, 1, 2])
def test_metric_jet_reassembled_from_christoffels(h, order):
    q = np.array([0.1, 0.2, -0.3])[: h.n]
    truth = [m[..., 0] for m in h.metric_jet(q[:, None], order + 1)]
    rebuilt = metric_jet_from_christoffel_jet(h.metric(q), h.christoffel_jet(q, order))
    assert len(rebuilt) == order + 2
    for a, b in zip(rebuilt, truth):
        assert np.allclose(a, b, atol=1e-12)


def test_metric_jet_rejects_indefinite_base():
    with pytest.raises(SingularMetricError):
        metric_jet_from_christoffel_jet(np.diag([1.0, -1.0]), [np.zeros((2, 2, 2))])


def test_order_cap():
    h = TargetMetric.euclidean(2)
    with pytest.raises(OrderExceededError):
        h.christoffel_jet(np.zeros(2), h.max_jet_order)


def test_nonsymmetric_target_rejected():
    with pytest.raises(ValueError):
        TargetMetric.from_expressions([["1", "y1"], ["0", "1"]])


def test_target_positive_check():
    h = TargetMetric.from_expressions([["1 - y1", "0"], ["0", "1"]])
    h.check_positive(np.array([0.5, 0.0]))
    with pytest.raises(SingularMetricError):
        h.check_positive(np.array([2.0, 0.0]))


def test_domain_metric_families():
    x, y = np.meshgrid(np.linspace(0, 1, 5), np.linspace(0, 1, 5))
    assert np.allclose(MetricField.euclidean().evaluate(x, y)[0, 1], 0.0)
    g = MetricField.constant(2.0, 0.5, 1.0).evaluate(x, y)
    assert g.shape == (2, 2, 5, 5) and np.allclose(g[0, 1], 0.5)
    parsed = MetricField.from_expressions("1 + x^2", "0", "1 + y^2")
    assert parsed.provenance == "parsed-expression"
    assert np.allclose(parsed.evaluate(x, y)[1, 1], 1 + y ** 2)
    with pytest.raises(SingularMetricError):
        MetricField.constant(1.0, 2.0, 1.0).check_positive(x, y)


def test_bubble_factor_is_one_on_boundary():
    case = ConformalTestCase.bubble(amplitude=0.7)
    s = np.linspace(0, 1, 9)
    for x, y in [(0 * s, s), (0 * s + 1, s), (s, 0 * s), (s, 0 * s + 1)]:
        assert np.allclose(case.factor(x, y), 1.0)
    assert case.factor(0.5, 0.5) == pytest.approx(1.7)
    g = case.metric().evaluate(0.5, 0.5)
    assert np.allclose(g, 1.7 * np.eye(2))
