"""One-level restricted additive Schwarz preconditioners (RAS and optimized RAS).

    M^-1 = sum_i R_i^T D_i B_i^-1 R_i

For ORAS, ``B_i`` is the curl-curl operator re-assembled on the overlapping
subdomain with an impedance condition ``(curl E) x n + i k n x (E x n)`` on
its artificial boundary, ``k`` the local wavenumber. For RAS, ``B_i`` is the
principal submatrix ``R_i A R_i^T``.
"""
from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import COUNTERS, FaceSet, kappa_per_tet, surface_triplets, tet_geometry, volume_triplets
from .mesh import OverlapDecomposition

try:
    import pymetis
except ImportError:  # pragma: no cover - ordering falls back to SuperLU's own
    pymetis = None


class FactorizationError(RuntimeError):
    pass


def fill_reducing_order(A):
    """Nested-dissection permutation of the symmetrized sparsity graph of `A`."""
    n = A.shape[0]
    if pymetis is None or n < 64:
        return None
    G = sp.csr_matrix((np.ones(A.nnz, dtype=np.int8), A.indices, A.indptr), shape=A.shape)
    G = (G + G.T).tocsr()
    G.setdiag(0)
    G.eliminate_zeros()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        perm, _ = pymetis.nested_dissection(xadj=G.indptr, adjncy=G.indices)
    return np.asarray(perm, dtype=np.int64)


class ExactLU:
    """Sparse LU with partial pivoting on a nested-dissection reordered matrix."""

    def __init__(self, A):
        A = sp.csr_matrix(A)
        self.n = A.shape[0]
        self.perm = fill_reducing_order(A)
        if self.perm is not None:
            A = A[self.perm][:, self.perm]
            spec = "NATURAL"
        else:
            spec = "MMD_AT_PLUS_A"
        self._lu = spla.splu(A.tocsc(), permc_spec=spec, options=dict(SymmetricMode=True))

    @property
    def nnz(self):
        return self._lu.L.nnz + self._lu.U.nnz

    def solve(self, b):
        """Solve for one vector or a block of columns in a single sweep."""
        b = np.asarray(b, dtype=complex)
        if self.n == 0:
            return b.copy()
        if self.perm is None:
            return self._lu.solve(b)
        out = np.empty_like(b)
        out[self.perm] = self._lu.solve(np.ascontiguousarray(b[self.perm]))
        return out


@dataclass(eq=False)
class OrasPreconditioner:
    """``sum_i R_i^T D_i B_i^-1 R_i`` on the reduced (metal-free) numbering.

    ``dofs[i]`` are reduced DoF indices of subdomain ``i``, ``weights[i]``
    their partition-of-unity values.
    """

    n: int
    dofs: list
    weights: list
    matrices: list
    solvers: list
    variant: str = "ORAS"
    threads: int = 1
    setup_times: list | None = None

    @property
    def n_subdomains(self):
        return len(self.dofs)

    def _local(self, i, X):
        return self.weights[i][:, None] * self.solvers[i].solve(X[self.dofs[i]])

    def apply_block(self, X):
        """Apply to a block ``(n, m)``; one multi-RHS solve per subdomain."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[0] != self.n:
            raise ValueError(f"expected a block with {self.n} rows, got shape {X.shape}")
        X = X.astype(complex, copy=False)
        idx = range(self.n_subdomains)
        if self.threads > 1 and self.n_subdomains > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda i: self._local(i, X), idx))
        else:
            parts = [self._local(i, X) for i in idx]
        Y = np.zeros_like(X)
        for i, part in zip(idx, parts):  # fixed order keeps the sum reproducible
            Y[self.dofs[i]] += part
        return Y

    def apply(self, x):
        x = np.asarray(x)
        if x.ndim != 1 or x.shape[0] != self.n:
            raise ValueError(f"expected a vector of length {self.n}, got shape {x.shape}")
        return self.apply_block(x[:, None])[:, 0]

    def as_linear_operator(self):
        return spla.LinearOperator((self.n, self.n), matvec=self.apply, matmat=self.apply_block,
                                   dtype=complex)


def interface_faces(mesh, tets):
    """Faces on the boundary of the tet set that are interior to the mesh.

    Returns ``(owning_tet, local_face)`` arrays with the owner inside `tets`.
    """
    topo = mesh.topology
    fids = topo.tet_faces[tets].ravel()
    uniq, counts = np.unique(fids, return_counts=True)
    cand = uniq[(counts == 1) & ~topo.boundary[uniq]]
    inside = np.zeros(mesh.n_tets, dtype=bool)
    inside[tets] = True
    ft, fl = topo.face_tets[cand], topo.face_local[cand]
    first = inside[ft[:, 0]]
    owner = np.where(first, ft[:, 0], ft[:, 1])
    local = np.where(first, fl[:, 0], fl[:, 1])
    return owner, local


def _local_matrix(triplets, loc, n_local):
    rows = np.concatenate([t[0] for t in triplets])
    cols = np.concatenate([t[1] for t in triplets])
    vals = np.concatenate([np.asarray(t[2], dtype=complex) for t in triplets])
    r, c = loc[rows], loc[cols]
    keep = (r >= 0) & (c >= 0)
    B = sp.coo_matrix((vals[keep], (r[keep], c[keep])), shape=(n_local, n_local)).tocsr()
    B.sum_duplicates()
    B.sort_indices()
    return B


def assemble_local_matrices(mesh, decomp: OverlapDecomposition, dof_map, material, params,
                            system: fem.ComplexSparseSystem, variant="ORAS", threads=1):
    """Build and factorize the local operators of every subdomain.

    Physical boundary faces inside a subdomain keep their global impedance
    term; faces on the artificial boundary get ``i k`` with ``k`` evaluated
    from the permittivity interpolated at the face centroid.
    """
    if decomp.dofs is None:
        raise ValueError("decomposition has no partition of unity; "
                         "call build_partition_of_unity first")
    if variant not in ("ORAS", "RAS"):
        raise ValueError(f"unknown variant {variant!r}")
    red = -np.ones(system.n_full, dtype=np.int64)
    red[system.free] = np.arange(system.n)
    geo = tet_geometry(mesh, dof_map)
    kap = kappa_per_tet(mesh, material, params) if variant == "ORAS" else None
    gfaces, _ = fem.system_faces(mesh) if variant == "ORAS" else (None, None)

    def build(i):
        t0 = time.perf_counter()
        full = decomp.dofs[i]
        keep = red[full] >= 0
        dofs = red[full[keep]]
        w = decomp.weights[i][keep]
        if decomp.n_subdomains == 1 and len(dofs) == system.n:
            # one subdomain covering everything: both variants reduce to A
            B = system.A[dofs][:, dofs].tocsr()
        elif variant == "RAS":
            B = system.A[dofs][:, dofs].tocsr()
        else:
            tets = decomp.overlap[i]
            inside = np.zeros(mesh.n_tets, dtype=bool)
            inside[tets] = True
            sel = inside[gfaces.tets]
            phys = FaceSet(gfaces.tets[sel], gfaces.local[sel], gfaces.areas[sel],
                           gfaces.normals[sel], gfaces.bary[sel], gfaces.weights)
            owner, local = interface_faces(mesh, tets)
            iface = FaceSet.build(mesh, owner, local)
            tri = mesh.tets[owner[:, None], fem.TET_FACES[local]]
            eps_c = material.eps[tri].mean(axis=1)
            eps_c = np.where(mesh.regions[owner] == 1, complex(params.eps_ceramic), eps_c)
            loc = -np.ones(system.n_full, dtype=np.int64)
            loc[full[keep]] = np.arange(len(dofs))
            B = _local_matrix([
                volume_triplets(dof_map, geo, kap, tets),
                surface_triplets(mesh, dof_map, geo, phys, np.full(len(phys), 1j * system.beta)),
                surface_triplets(mesh, dof_map, geo, iface, 1j * params.wavenumber(eps_c)),
            ], loc, len(dofs))
        try:
            lu = ExactLU(B)
        except RuntimeError as exc:
            raise FactorizationError(f"subdomain {i}: local factorization failed ({exc})") from exc
        return dofs, w, B, lu, time.perf_counter() - t0

    idx = range(decomp.n_subdomains)
    if threads > 1 and decomp.n_subdomains > 1:
        with ThreadPoolExecutor(threads) as pool:
            built = list(pool.map(build, idx))
    else:
        built = [build(i) for i in idx]
    COUNTERS["factorize_preconditioner"] += 1
    dofs, weights, mats, solvers, times = (list(v) for v in zip(*built))
    return OrasPreconditioner(system.n, dofs, weights, mats, solvers, variant, threads, times)

