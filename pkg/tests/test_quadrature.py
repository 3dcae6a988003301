"""Simplex quadrature rules: polynomial exactness and basic structure."""

import math

import numpy as np
import pytest

from mdtsim.quadrature import (max_order, quadrature_rule, reference_volume,
                               segment_rule)


def _monomial_integral_triangle(a: int, b: int) -> float:
    # int_T x^a y^b over the unit reference triangle
    return (math.factorial(a) * math.factorial(b)
            / math.factorial(a + b + 2))


def _monomial_integral_tet(a: int, b: int, c: int) -> float:
    return (math.factorial(a) * math.factorial(b) * math.factorial(c)
            / math.factorial(a + b + c + 3))


@pytest.mark.parametrize("order", range(1, 7))
def test_triangle_exactness(order):
    lam, w = quadrature_rule(2, order)
    x, y = lam[:, 1], lam[:, 2]
    assert w.sum() == pytest.approx(0.5, rel=1e-14)
    for a in range(order + 1):
        for b in range(order + 1 - a):
            val = (w * x ** a * y ** b).sum()
            assert val == pytest.approx(
                _monomial_integral_triangle(a, b), rel=1e-12, abs=1e-16)


@pytest.mark.parametrize("order", range(1, 7))
def test_tetrahedron_exactness(order):
    lam, w = quadrature_rule(3, order)
    x, y, z = lam[:, 1], lam[:, 2], lam[:, 3]
    assert w.sum() == pytest.approx(1.0 / 6.0, rel=1e-13)
    for a in range(order + 1):
        for b in range(order + 1 - a):
            for c in range(order + 1 - a - b):
                val = (w * x ** a * y ** b * z ** c).sum()
                assert val == pytest.approx(
                    _monomial_integral_tet(a, b, c), rel=1e-11, abs=1e-16)


def test_segment_exactness():
    for order in range(1, 13):
        x, w = segment_rule(order)
        assert w.sum() == pytest.approx(1.0, rel=1e-14)
        for a in range(order + 1):
            assert (w * x ** a).sum() == pytest.approx(
                1.0 / (a + 1), rel=1e-13)


def test_barycentric_structure():
    for dim in (2, 3):
        for order in range(1, max_order(dim) + 1):
            lam, w = quadrature_rule(dim, order)
            assert lam.shape[1] == dim + 1
            assert len(lam) == len(w)
            assert np.allclose(lam.sum(axis=1), 1.0, atol=1e-14)
            assert np.all(lam >= -1e-14)
    assert reference_volume(2) == pytest.approx(0.5)
    assert reference_volume(3) == pytest.approx(1.0 / 6.0)


def test_triangle_weights_positive():
    # the 2D family is chosen with positive weights throughout
    for order in range(1, 7):
        _, w = quadrature_rule(2, order)
        assert np.all(w > 0)


def test_rules_are_immutable_and_cached():
    lam1, w1 = quadrature_rule(2, 4)
    lam2, w2 = quadrature_rule(2, 4)
    assert lam1 is lam2 and w1 is w2
    with pytest.raises(ValueError):
        w1[0] = 0.0


def test_invalid_requests_rejected():
    with pytest.raises(ValueError):
        quadrature_rule(4, 2)
    with pytest.raises(ValueError):
        quadrature_rule(2, 0)
