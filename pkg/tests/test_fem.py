import math
from itertools import product

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from scipy import constants

from maxtomo import fem
from maxtomo.fem import (LOCAL_EDGES, MaterialField, PhysicsParams, assemble_system,
                         assemble_volume_source, build_edge_dof_map, hcurl_error, metal_dofs,
                         te10_mode, tet_geometry, to_csr, volume_triplets)
from maxtomo.mesh import METAL, box_mesh, mesh_from_tets
from maxtomo.quadrature import gauss_legendre01, tetrahedron_rule, triangle_rule


# -- independent oracles ---------------------------------------------------------


def barycentric(p, x):
    """Barycentric coordinates of points `x` in the tet with vertices `p`."""
    T = np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])
    lam = np.linalg.solve(T, (np.atleast_2d(x) - p[0]).T).T
    return np.column_stack([1 - lam.sum(axis=1), lam])


def whitney(p, x, i, j):
    """``lambda_i grad lambda_j - lambda_j grad lambda_i`` at points `x`."""
    lam = barycentric(p, x)
    # barycentric coordinates are affine: a unit difference is exact
    grads = np.array([barycentric(p, p[0] + e)[0] - barycentric(p, p[0])[0]
                      for e in np.eye(3)]).T  # (4, 3)
    return lam[:, i, None] * grads[j] - lam[:, j, None] * grads[i]


def duffy_points(p, n=7):
    """Gauss-Legendre tensor rule on the tet through the Duffy collapse."""
    s, w = gauss_legendre01(n)
    pts, wts = [], []
    for (a, wa), (b, wb), (c, wc) in product(zip(s, w), repeat=3):
        x = a
        y = b * (1 - a)
        z = c * (1 - a) * (1 - b)
        jac = (1 - a) ** 2 * (1 - b)
        pts.append(p[0] + x * (p[1] - p[0]) + y * (p[2] - p[0]) + z * (p[3] - p[0]))
        wts.append(wa * wb * wc * jac)
    vol6 = abs(np.linalg.det(np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])))
    return np.array(pts), np.array(wts) * vol6


def random_tets(rng, n):
    out = []
    while len(out) < n:
        p = rng.normal(size=(4, 3))
        v = np.linalg.det(np.column_stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) / 6
        if abs(v) > 0.05:
            out.append(p)
    return out


def one_tet_mesh(p):
    return mesh_from_tets(p, [[0, 1, 2, 3]])


# -- quadrature ------------------------------------------------------------------


def test_quadrature_exact_on_monomials():
    tb, tw = triangle_rule(4)
    bary, w = tetrahedron_rule(4)
    for a, b, c in product(range(5), repeat=3):
        if a + b + c <= 4:
            exact = 2 * math.factorial(a) * math.factorial(b) * math.factorial(c) / \
                math.factorial(a + b + c + 2)
            assert np.isclose(np.sum(tw * tb[:, 0] ** a * tb[:, 1] ** b * tb[:, 2] ** c), exact)
    for e in product(range(5), repeat=4):
        if sum(e) <= 4:
            exact = 6 * np.prod([math.factorial(k) for k in e]) / math.factorial(sum(e) + 3)
            got = np.sum(w * np.prod(bary ** np.array(e), axis=1))
            assert np.isclose(got, exact, rtol=1e-13)


# -- edge elements ---------------------------------------------------------------


def test_box_with_one_cube_has_19_edges():
    m = box_mesh(1)
    dm = build_edge_dof_map(m)
    assert dm.n_dofs == 19
    # every boundary edge is metallic: only the body diagonal survives
    assert len(metal_dofs(m, dm)) == 18


def test_basis_matches_independent_formula(rng):
    for p in random_tets(rng, 10):
        m = one_tet_mesh(p)
        dm = build_edge_dof_map(m)
        geo = tet_geometry(m, dm)
        x = p[0] + rng.random((5, 3)) @ (p[1:] - p[0]) * 0.3
        lam = barycentric(m.nodes[m.tets[0]], x)
        w = geo.basis(np.array([0]), lam)[0]
        for a, (i, j) in enumerate(LOCAL_EDGES):
            ref = whitney(m.nodes[m.tets[0]], x, i, j) * dm.tet_signs[0, a]
            assert np.allclose(w[:, a], ref, atol=1e-8)


def test_edge_duality_kronecker(rng):
    s, ws = gauss_legendre01(3)
    for p in random_tets(rng, 100):
        m = one_tet_mesh(p)
        dm = build_edge_dof_map(m)
        geo = tet_geometry(m, dm)
        C = np.zeros((6, 6))
        for a in range(6):
            e = dm.tet_edges[0, a]
            lo, hi = dm.edges[e]
            ilo = list(m.tets[0]).index(lo)
            ihi = list(m.tets[0]).index(hi)
            bary = np.zeros((len(s), 4))
            bary[:, ilo] = 1 - s
            bary[:, ihi] = s
            w = geo.basis(np.array([0]), bary)[0]  # (Q, 6, 3)
            C[e] = np.einsum("q,qbx,x->b", ws, w, dm.tangents[e])
        C = C[:, dm.tet_edges[0]]
        assert np.max(np.abs(C - np.eye(6))) <= 1e-12


def test_element_matrices_against_dense_quadrature(rng):
    for p in random_tets(rng, 5):
        m = one_tet_mesh(p)
        dm = build_edge_dof_map(m)
        geo = tet_geometry(m, dm)
        pv = m.nodes[m.tets[0]]
        kap = rng.normal(size=4) + 1j * rng.normal(size=4)
        x, w = duffy_points(pv)
        lam = barycentric(pv, x)
        kx = lam @ kap
        W = np.stack([whitney(pv, x, i, j) * dm.tet_signs[0, a]
                      for a, (i, j) in enumerate(LOCAL_EDGES)], axis=1)
        mass = np.einsum("q,q,qax,qbx->ab", w, kx, W, W)
        # curl of lambda_i grad lambda_j - lambda_j grad lambda_i is 2 grad_i x grad_j
        h = 1e-3  # w is affine in x, so central differences are exact up to rounding
        curls = []
        for a, (i, j) in enumerate(LOCAL_EDGES):
            c0 = x[:1]
            J = np.array([(whitney(pv, c0 + h * e, i, j) - whitney(pv, c0 - h * e, i, j))[0] / (2 * h)
                          for e in np.eye(3)])  # J[k, l] = d w_l / d x_k
            curls.append(dm.tet_signs[0, a] * np.array([J[1, 2] - J[2, 1], J[2, 0] - J[0, 2],
                                                        J[0, 1] - J[1, 0]]))
        curls = np.array(curls)
        stiff = w.sum() * curls @ curls.T
        loc = np.einsum("m,mab->ab", kap, geo.mass3[0])
        assert np.allclose(loc, mass, rtol=1e-10, atol=1e-12 * np.abs(mass).max())
        assert np.allclose(geo.stiffness[0], stiff, rtol=1e-9, atol=1e-10 * np.abs(stiff).max())


def test_global_system_is_complex_symmetric(small_chamber, small_dofs, params):
    S = assemble_system(small_chamber, small_dofs, MaterialField.uniform(small_chamber, 44 - 20j),
                        params)
    A = S.A
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    assert S.B.shape == (S.n, 8)


def test_assembly_rejects_bad_material(small_chamber, small_dofs, params):
    bad = np.full(small_chamber.n_nodes, 44 - 20j)
    bad[3] = np.nan
    with pytest.raises(fem.AssemblyError, match="NaN"):
        assemble_system(small_chamber, small_dofs, MaterialField(bad), params)
    with pytest.raises(fem.AssemblyError):
        assemble_system(small_chamber, small_dofs, MaterialField(bad[:-1]), params)


# -- ports -----------------------------------------------------------------------


def test_te10_propagation_constant():
    pp = PhysicsParams()
    k0 = 2 * np.pi * 1e9 / constants.c
    ref = np.sqrt(k0**2 * 59 - (np.pi / 0.03) ** 2)
    assert np.isclose(pp.beta, ref, rtol=1e-6)
    assert abs(pp.beta - 122.27) < 0.01


def test_below_cutoff_raises():
    with pytest.raises(ValueError, match="cutoff"):
        PhysicsParams(frequency=2e8).beta


def test_port_mode_on_flat_port():
    a, b = 0.03, 0.015

    def tags(tris, c, n):
        return np.where(np.isclose(c[:, 0], 0.0), 1, METAL)

    m = box_mesh((4, 4, 4), lengths=(0.02, a, b), tag_boundary=tags)
    mode, beta = te10_mode(m, 1, PhysicsParams(port_width=a, port_height=b),
                           dof_map=build_edge_dof_map(m))
    assert np.isclose(mode.width, a) and np.isclose(mode.height, b)
    assert np.isclose(mode.norm2, mode.analytic_norm2, rtol=2e-3)
    assert np.allclose(np.abs(mode.eta_axis), [0, 0, 1])
    assert np.allclose(mode.normal, [-1, 0, 0])


# -- manufactured solution ---------------------------------------------------------


def mms_field(x):
    s = np.sin(np.pi * x)
    return np.stack([s[..., 1] * s[..., 2], s[..., 0] * s[..., 2], s[..., 0] * s[..., 1]], axis=-1)


def mms_curl(x):
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    return np.pi * np.stack([s[..., 0] * (c[..., 1] - c[..., 2]),
                             s[..., 1] * (c[..., 2] - c[..., 0]),
                             s[..., 2] * (c[..., 0] - c[..., 1])], axis=-1)


def solve_mms(n, kappa=1.0):
    m = box_mesh(n)
    dm = build_edge_dof_map(m)
    geo = tet_geometry(m, dm)
    kap = np.full((m.n_tets, 4), kappa, dtype=complex)
    A = to_csr(dm.n_dofs, volume_triplets(dm, geo, kap))
    b = assemble_volume_source(m, dm, lambda x: (2 * np.pi**2 - kappa) * mms_field(x))
    free = np.setdiff1d(np.arange(dm.n_dofs), metal_dofs(m, dm))
    u = np.zeros(dm.n_dofs, dtype=complex)
    u[free] = spla.spsolve(A[free][:, free].tocsc(), b[free])
    e0, e1 = hcurl_error(u, mms_field, mms_curl, m, dm)
    return math.hypot(e0, e1)


def test_mms_first_order_convergence():
    errs = [solve_mms(n) for n in (2, 4, 8)]
    ratios = [a / b for a, b in zip(errs[:-1], errs[1:])]
    assert all(r >= 1.5 for r in ratios), ratios


def test_interpolant_is_exact_for_constant_fields(rng):
    m = box_mesh(2)
    dm = build_edge_dof_map(m)
    c = rng.normal(size=3)
    u = fem.circulations_of(lambda x: np.broadcast_to(c, x.shape), dm, m.nodes)
    e0, e1 = hcurl_error(u, lambda x: np.broadcast_to(c, x.shape),
                         lambda x: np.zeros(x.shape), m, dm)
    assert e0 < 1e-13 and e1 < 1e-13
