import numpy as np
import pytest
import scipy.sparse as sp

from maxtomo.ddm import ExactLU, assemble_local_matrices, interface_faces
from maxtomo.fem import MaterialField, assemble_system, build_edge_dof_map
from maxtomo.krylov import gmres
from maxtomo.mesh import build_partition_of_unity, grow_overlap, partition
from maxtomo.phantom import EPS_GEL


@pytest.fixture(scope="module")
def chamber_system(small_chamber, small_dofs, params):
    mat = MaterialField.uniform(small_chamber, EPS_GEL)
    return mat, assemble_system(small_chamber, small_dofs, mat, params)


def make_precond(mesh, dm, mat, params, system, ns, delta=1, variant="ORAS"):
    dec = build_partition_of_unity(grow_overlap(mesh, partition(mesh, ns), delta), mesh, dm)
    return assemble_local_matrices(mesh, dec, dm, mat, params, system, variant=variant), dec


def dense_schwarz(P):
    """``sum_i R_i^T D_i B_i^{-1} R_i`` built with dense inverses."""
    M = np.zeros((P.n, P.n), dtype=complex)
    for d, w, B in zip(P.dofs, P.weights, P.matrices):
        M[np.ix_(d, d)] += w[:, None] * np.linalg.inv(B.toarray())
    return M


def test_exact_lu_solves_block(rng):
    n = 300
    A = sp.random(n, n, density=0.02, random_state=3, format="csr") + 4 * sp.eye(n)
    A = (A + 1j * sp.random(n, n, density=0.01, random_state=4)).tocsr()
    lu = ExactLU(A)
    assert lu.perm is not None
    B = rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))
    X = lu.solve(B)
    assert np.linalg.norm(A @ X - B) <= 1e-12 * np.linalg.norm(B)


@pytest.mark.parametrize("variant", ["ORAS", "RAS"])
def test_preconditioner_matches_dense_oracle(small_chamber, small_dofs, params, chamber_system,
                                             variant, rng):
    mat, system = chamber_system
    P, _ = make_precond(small_chamber, small_dofs, mat, params, system, 2, variant=variant)
    M = dense_schwarz(P)
    X = rng.normal(size=(system.n, 3)) + 1j * rng.normal(size=(system.n, 3))
    Y = P.apply_block(X)
    assert np.linalg.norm(Y - M @ X) <= 1e-10 * np.linalg.norm(M @ X)
    assert np.allclose(P.apply(X[:, 0]), Y[:, 0], rtol=0, atol=1e-14 * np.abs(Y).max())


def test_ras_local_matrices_are_principal_submatrices(small_chamber, small_dofs, params,
                                                       chamber_system):
    mat, system = chamber_system
    P, _ = make_precond(small_chamber, small_dofs, mat, params, system, 4, variant="RAS")
    for d, B in zip(P.dofs, P.matrices):
        assert abs(B - system.A[d][:, d]).max() == 0


def test_oras_local_matrix_agrees_with_a_away_from_interface(small_chamber, small_dofs, params,
                                                             chamber_system):
    mat, system = chamber_system
    P, dec = make_precond(small_chamber, small_dofs, mat, params, system, 4)
    red = -np.ones(system.n_full, dtype=np.int64)
    red[system.free] = np.arange(system.n)
    for i in range(4):
        owner, local = interface_faces(small_chamber, dec.overlap[i])
        # DoFs touching the artificial boundary or tets outside the subdomain
        inside = np.zeros(small_chamber.n_tets, dtype=bool)
        inside[dec.overlap[i]] = True
        touched = np.zeros(system.n_full, dtype=bool)
        touched[small_dofs.tet_edges[~inside].ravel()] = True
        tri = small_chamber.tets[owner[:, None], np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3],
                                                           [0, 1, 2]])[local]]
        for a, b in ((0, 1), (1, 2), (0, 2)):
            touched[small_dofs.lookup(tri[:, a], tri[:, b])] = True
        d = P.dofs[i]
        clean = ~touched[system.free[d]]
        rows = np.flatnonzero(clean)
        B = P.matrices[i][rows].toarray()
        A = system.A[d[rows]][:, d].toarray()
        assert np.abs(B - A).max() <= 1e-12 * np.abs(A).max()
        # and the interface rows do differ (impedance term present)
        if (~clean).any():
            assert np.abs(P.matrices[i] - system.A[d][:, d]).max() > 0


def test_interface_faces_brute_force(small_chamber):
    tets = np.flatnonzero(partition(small_chamber, 2) == 0)
    owner, local = interface_faces(small_chamber, tets)
    inside = set(tets.tolist())
    count = {}
    for t in range(small_chamber.n_tets):
        for f in range(4):
            key = tuple(sorted(np.delete(small_chamber.tets[t], f)))
            count.setdefault(key, []).append(t)
    expect = {k for k, ts in count.items()
              if len(ts) == 2 and (ts[0] in inside) != (ts[1] in inside)}
    got = {tuple(sorted(np.delete(small_chamber.tets[t], f))) for t, f in zip(owner, local)}
    assert got == expect
    assert all(t in inside for t in owner)


@pytest.mark.parametrize("ns", [2, 4, 8])
def test_ddm_solution_matches_single_domain(small_chamber, small_dofs, params, chamber_system,
                                            ns):
    mat, system = chamber_system
    P1, _ = make_precond(small_chamber, small_dofs, mat, params, system, 1)
    X1, s1 = gmres(system.A, system.B, P1, tol=1e-8)
    assert np.all(s1.iterations == 1)
    P, _ = make_precond(small_chamber, small_dofs, mat, params, system, ns)
    X, st = gmres(system.A, system.B, P, tol=1e-8)
    assert st.converged.all()
    assert np.linalg.norm(X - X1) <= 1e-6 * np.linalg.norm(X1)


def test_oras_beats_ras(small_chamber, small_dofs, params, chamber_system):
    mat, system = chamber_system
    its = {}
    for v in ("ORAS", "RAS"):
        P, _ = make_precond(small_chamber, small_dofs, mat, params, system, 4, variant=v)
        its[v] = gmres(system.A, system.B[:, :2], P, tol=1e-8)[1].iterations.max()
    assert its["ORAS"] <= its["RAS"]


def test_apply_rejects_wrong_shape(small_chamber, small_dofs, params, chamber_system):
    mat, system = chamber_system
    P, _ = make_precond(small_chamber, small_dofs, mat, params, system, 2)
    with pytest.raises(ValueError):
        P.apply(np.zeros(system.n + 1))


def test_threaded_application_is_bitwise_identical(small_chamber, small_dofs, params,
                                                   chamber_system, rng):
    mat, system = chamber_system
    P, _ = make_precond(small_chamber, small_dofs, mat, params, system, 4)
    X = rng.normal(size=(system.n, 2)) + 0j
    Y1 = P.apply_block(X)
    P.threads = 4
    Y4 = P.apply_block(X)
    assert np.array_equal(Y1, Y4)


def test_unknown_variant(small_chamber, small_dofs, params, chamber_system):
    mat, system = chamber_system
    dm = build_edge_dof_map(small_chamber)
    dec = build_partition_of_unity(grow_overlap(small_chamber, partition(small_chamber, 2), 1),
                                   small_chamber, dm)
    with pytest.raises(ValueError, match="variant"):
        assemble_local_matrices(small_chamber, dec, dm, mat, params, system, variant="AS")
