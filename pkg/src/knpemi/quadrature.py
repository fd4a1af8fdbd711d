"""Quadrature rules on reference simplices.

Rules are exact to the requested total polynomial degree. Points are given
in reference coordinates on the unit simplex; weights sum to the reference
measure (1 for the unit interval, 1/2 for the unit triangle, 1/6 for the
unit tetrahedron). Triangle and tetrahedron rules are conical products of
Gauss-Legendre and Gauss-Jacobi lines, so all weights are positive and
degree exactness holds by construction.
"""

from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi


def _gauss_01(n):
    # Gauss-Legendre shifted to [0, 1]
    x, w = leggauss(n)
    return (x + 1.0) / 2.0, w / 2.0


def _jacobi_01(n, alpha):
    # Gauss-Jacobi for weight (1-x)^alpha on [0, 1]
    x, w = roots_jacobi(n, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def segment_rule(degree):
    """Rule on the unit interval, exact for polynomials of the given degree."""
    n = degree // 2 + 1
    x, w = _gauss_01(n)
    return x.reshape(-1, 1), w


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule on the unit triangle {x, y >= 0, x + y <= 1}."""
    n = degree // 2 + 1
    xi, wx = _gauss_01(n)
    eta, we = _jacobi_01(n, 1.0)
    # Duffy map (xi, eta) -> (xi (1 - eta), eta); the (1 - eta) factor is the
    # Jacobian, absorbed into the Jacobi weight.
    x = np.outer(1.0 - eta, xi).ravel()
    y = np.repeat(eta, n)
    w = np.outer(we, wx).ravel()
    return np.column_stack([x, y]), w


@lru_cache(maxsize=None)
def tetrahedron_rule(degree):
    """Rule on the unit tetrahedron {x, y, z >= 0, x + y + z <= 1}."""
    n = degree // 2 + 1
    xi, wx = _gauss_01(n)
    eta, we = _jacobi_01(n, 1.0)
    zeta, wz = _jacobi_01(n, 2.0)
    pts = np.empty((n * n * n, 3))
    w = np.empty(n * n * n)
    idx = 0
    for k in range(n):
        for j in range(n):
            for i in range(n):
                pts[idx] = (
                    xi[i] * (1.0 - eta[j]) * (1.0 - zeta[k]),
                    eta[j] * (1.0 - zeta[k]),
                    zeta[k],
                )
                w[idx] = wx[i] * we[j] * wz[k]
                idx += 1
    return pts, w


_RULES = {1: segment_rule, 2: triangle_rule, 3: tetrahedron_rule}


def simplex_rule(tdim, degree):
    """Rule for the unit simplex of topological dimension tdim (1, 2 or 3)."""
    return _RULES[tdim](degree)
