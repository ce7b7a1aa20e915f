"""Collapsed Gauss-Jacobi quadrature on the reference triangle and tetrahedron.

Rules are returned in barycentric form with weights summing to one, so a
physical integral is ``measure * sum(w * f(x))``.
"""
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


def _jacobi01(n, alpha):
    # nodes/weights on [0, 1] for the weight (1 - u)**alpha
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (1.0 + x), w * 0.5 ** (alpha + 1)


@lru_cache(maxsize=None)
def triangle_rule(degree=4):
    """Barycentric points ``(Q, 3)`` and weights ``(Q,)`` exact to `degree`."""
    n = degree // 2 + 1
    u, wu = _jacobi01(n, 1.0)
    v, wv = _jacobi01(n, 0.0)
    U, V = np.meshgrid(u, v, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = np.outer(wu, wv).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    w = w / w.sum()
    bary.flags.writeable = False
    w.flags.writeable = False
    return bary, w


@lru_cache(maxsize=None)
def tetrahedron_rule(degree=4):
    """Barycentric points ``(Q, 4)`` and weights ``(Q,)`` exact to `degree`."""
    n = degree // 2 + 1
    u, wu = _jacobi01(n, 2.0)
    v, wv = _jacobi01(n, 1.0)
    s, ws = _jacobi01(n, 0.0)
    U, V, S = np.meshgrid(u, v, s, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    z = (S * (1.0 - U) * (1.0 - V)).ravel()
    w = np.einsum("i,j,k->ijk", wu, wv, ws).ravel()
    bary = np.column_stack([1.0 - x - y - z, x, y, z])
    w = w / w.sum()
    bary.flags.writeable = False
    w.flags.writeable = False
    return bary, w


def gauss_legendre01(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (1.0 + x), 0.5 * w
