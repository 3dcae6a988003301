"""Quadrature rules on reference simplices.

Rules are returned in barycentric coordinates with weights that sum to the
reference volume (1/2 for the unit triangle, 1/6 for the unit tetrahedron,
1 for the unit segment), so assembled integrals only need the Jacobian
determinant of the affine cell map.

Triangle rules up to degree 6 are symmetric Gauss rules with positive
weights.  Tetrahedron rules of degree 3 and higher come from the
Grundmann-Moeller simplex construction, whose weights alternate in sign;
that is acceptable here because the rules are only used for polynomial
integrands of matching degree.
"""

from __future__ import annotations

from functools import lru_cache
from math import factorial

import numpy as np

__all__ = ["quadrature_rule", "reference_volume", "segment_rule", "max_order"]

#: Highest polynomial degree integrated exactly, per dimension.
_MAX_ORDER = {1: 12, 2: 6, 3: 6}


def max_order(dim: int) -> int:
    """Highest supported quadrature order for simplices of dimension `dim`."""
    return _MAX_ORDER[dim]


def reference_volume(dim: int) -> float:
    """Volume of the unit reference simplex: 1, 1/2 or 1/6."""
    return 1.0 / factorial(dim)


def _perms(*groups):
    """Expand (weight, barycentric orbit) groups into point/weight arrays.

    Each group is a tuple ``(w, coords)``; all distinct permutations of
    ``coords`` are generated with weight ``w``.
    """
    from itertools import permutations

    pts, wts = [], []
    for w, coords in groups:
        for p in sorted(set(permutations(coords))):
            pts.append(p)
            wts.append(w)
    return np.array(pts, dtype=float), np.array(wts, dtype=float)


def _triangle_rule(order: int):
    # Symmetric rules on the triangle; weights below are normalized to sum
    # to 1 and rescaled to the reference area afterwards.
    if order <= 1:
        pts, wts = _perms((1.0, (1 / 3, 1 / 3, 1 / 3)))
    elif order == 2:
        pts, wts = _perms((1 / 3, (2 / 3, 1 / 6, 1 / 6)))
    elif order <= 4:
        pts, wts = _perms(
            (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
            (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
        )
    elif order == 5:
        pts, wts = _perms(
            (0.225, (1 / 3, 1 / 3, 1 / 3)),
            (0.132394152788506, (0.059715871789770, 0.470142064105115, 0.470142064105115)),
            (0.125939180544827, (0.797426985353087, 0.101286507323456, 0.101286507323456)),
        )
    elif order == 6:
        pts, wts = _perms(
            (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
            (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
            (0.082851075618374, (0.053145049844816, 0.310352451033785, 0.636502499121399)),
        )
    else:
        raise ValueError(f"triangle quadrature order {order} not supported")
    return pts, wts * 0.5


def _grundmann_moeller(dim: int, s: int):
    """Grundmann-Moeller rule of degree 2s+1 on the dim-simplex."""
    from itertools import combinations_with_replacement

    d = 2 * s + 1
    n = dim
    pts, wts = [], []
    for i in range(s + 1):
        w = (
            (-1) ** i
            * 2.0 ** (-2 * s)
            * float(d + n - 2 * i) ** d
            / (factorial(i) * factorial(d + n - i))
        )
        denom = d + n - 2 * i
        for combo in combinations_with_replacement(range(n + 1), s - i):
            beta = np.zeros(n + 1)
            for idx in combo:
                beta[idx] += 1
            pts.append((2 * beta + 1) / denom)
            wts.append(w)
    # Normalization: raw weights sum to 1/n! times a known constant; rescale
    # exactly to the reference volume using the constant-1 integrand.
    pts = np.array(pts, dtype=float)
    wts = np.array(wts, dtype=float)
    wts *= reference_volume(n) / wts.sum()
    return pts, wts


def _tetrahedron_rule(order: int):
    if order <= 1:
        pts, wts = _perms((1.0, (0.25, 0.25, 0.25, 0.25)))
        return pts, wts / 6.0
    if order == 2:
        a = (5.0 - np.sqrt(5.0)) / 20.0
        b = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
        pts, wts = _perms((0.25, (b, a, a, a)))
        return pts, wts / 6.0
    if order <= 3:
        return _grundmann_moeller(3, 1)
    if order <= 5:
        return _grundmann_moeller(3, 2)
    if order == 6:
        return _grundmann_moeller(3, 3)
    raise ValueError(f"tetrahedron quadrature order {order} not supported")


def _segment_rule_unit(order: int):
    # Gauss-Legendre mapped from [-1, 1] to [0, 1].
    n = max(1, (order + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _rule_cached(dim: int, order: int):
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    if dim == 1:
        x, w = _segment_rule_unit(order)
        pts = np.column_stack([1.0 - x, x])
    elif dim == 2:
        pts, w = _triangle_rule(order)
    elif dim == 3:
        pts, w = _tetrahedron_rule(order)
    else:
        raise ValueError(f"no quadrature rules for dimension {dim}")
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


def quadrature_rule(dim: int, order: int):
    """Return a rule exact for polynomials up to degree `order`.

    Parameters
    ----------
    dim : int
        Simplex dimension (1, 2 or 3).
    order : int
        Requested polynomial exactness, ``1 <= order <= max_order(dim)``.

    Returns
    -------
    points : (n_q, dim+1) ndarray
        Barycentric coordinates of the quadrature points.
    weights : (n_q,) ndarray
        Weights summing to the reference simplex volume.
    """
    return _rule_cached(dim, order)


def segment_rule(order: int):
    """Gauss rule on the unit segment [0, 1]; weights sum to 1."""
    x, w = _segment_rule_unit(order)
    return x.copy(), w.copy()
