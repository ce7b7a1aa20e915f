"""Lowest-order Nedelec (Whitney) edge elements for the curl-curl problem.

The discrete operator is

    A = K - M(kappa) + sum_faces  i*beta * S_face

with ``K`` the curl-curl stiffness, ``M(kappa)`` the mass matrix weighted by a
P1 coefficient and ``S_face`` the tangential surface mass on impedance faces.
All three are symmetric (no conjugation), so ``A = A.T``.

Edges are oriented from the lower to the higher node index; the local
Whitney function of edge ``(i, j)`` is ``l_i grad l_j - l_j grad l_i``.
"""
from __future__ import annotations

import math
import weakref
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.constants as const
import scipy.sparse as sp

from .mesh import ABSORBING, METAL, TET_FACES, Mesh, outward_normals
from .quadrature import gauss_legendre01, tetrahedron_rule, triangle_rule

MU0 = const.mu_0
EPS0 = const.epsilon_0

#: local vertex pairs of the six tet edges
LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
#: local edge ids lying on face f (opposite vertex f)
FACE_EDGES = np.array([[e for e, (a, b) in enumerate(LOCAL_EDGES) if f not in (a, b)]
                       for f in range(4)])

#: number of global assemblies, preconditioner setups and block solves
COUNTERS = Counter()


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicsParams:
    """Frequency, port and ceramic parameters of the direct problem."""

    frequency: float = 1e9
    eps_ceramic: complex = 59.0
    port_width: float = 0.03
    port_height: float = 0.015
    amplitude: float = 1.0

    @property
    def omega(self):
        return 2 * math.pi * self.frequency

    @property
    def k0sq(self):
        """``omega**2 * mu0 * eps0``: converts relative permittivity to kappa."""
        return self.omega**2 * MU0 * EPS0

    def wavenumber(self, eps_r):
        """Complex wavenumber ``omega * sqrt(mu0 * eps_r * eps0)`` (principal root)."""
        return np.sqrt(self.k0sq * np.asarray(eps_r, dtype=complex))

    def cutoff_frequency(self):
        eps = complex(self.eps_ceramic).real
        return 1.0 / (2 * self.port_width * math.sqrt(MU0 * EPS0 * eps))

    @property
    def beta(self):
        """TE10 propagation wavenumber in the ceramic-loaded port."""
        eps = complex(self.eps_ceramic)
        kc = math.pi / self.port_width
        if self.k0sq * eps.real <= kc**2:
            raise ValueError(f"frequency {self.frequency:.6g} Hz is below the TE10 cutoff "
                             f"{self.cutoff_frequency():.6g} Hz of a {self.port_width} m port")
        b = np.sqrt(self.k0sq * eps - kc**2 + 0j)
        b = b if b.real > 0 else -b
        return b.real if abs(b.imag) <= 1e-14 * abs(b) else complex(b)


@dataclass(eq=False)
class MaterialField:
    """Nodal (P1) complex relative permittivity."""

    eps: np.ndarray

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=complex).reshape(-1)

    @classmethod
    def uniform(cls, mesh: Mesh, value):
        return cls(np.full(mesh.n_nodes, complex(value)))

    def kappa(self, params: PhysicsParams):
        return params.k0sq * self.eps


def kappa_per_tet(mesh: Mesh, material: MaterialField, params: PhysicsParams):
    """``(M, 4)`` vertex values of kappa; ceramic tets (region 1) are fixed."""
    if material.eps.shape != (mesh.n_nodes,):
        raise AssemblyError(f"material has {material.eps.size} values for {mesh.n_nodes} nodes")
    if not np.all(np.isfinite(material.eps)):
        raise AssemblyError("material contains NaN or infinite values")
    kap = params.k0sq * material.eps[mesh.tets]
    kap[mesh.regions == 1] = params.k0sq * complex(params.eps_ceramic)
    return kap


# ---------------------------------------------------------------------------
# degrees of freedom


@dataclass(eq=False)
class EdgeDofMap:
    """Global edge numbering.

    ``edges[e]`` is the node pair (low, high); ``tet_edges[t, a]`` the global
    edge of local edge ``a`` and ``tet_signs[t, a]`` is ``-1`` where the local
    pair order disagrees with the global one. ``tangents[e]`` is the edge
    vector ``x_high - x_low`` with length ``lengths[e]``.
    """

    edges: np.ndarray
    tet_edges: np.ndarray
    tet_signs: np.ndarray
    tangents: np.ndarray
    lengths: np.ndarray
    n_nodes: int

    @property
    def n_dofs(self):
        return len(self.edges)

    def lookup(self, a, b):
        """Global ids of the edges ``(a, b)`` (any order); ``-1`` if absent."""
        a, b = np.minimum(a, b), np.maximum(a, b)
        key = a.astype(np.int64) * self.n_nodes + b
        pos = np.clip(np.searchsorted(self._keys, key), 0, len(self._keys) - 1)
        return np.where(self._keys[pos] == key, pos, -1)

    @property
    def _keys(self):
        return self.edges[:, 0] * np.int64(self.n_nodes) + self.edges[:, 1]


def build_edge_dof_map(mesh: Mesh) -> EdgeDofMap:
    pairs = mesh.tets[:, LOCAL_EDGES]  # (M, 6, 2)
    lo = pairs.min(axis=2)
    hi = pairs.max(axis=2)
    keys = lo * np.int64(mesh.n_nodes) + hi
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    edges = np.column_stack([uniq // mesh.n_nodes, uniq % mesh.n_nodes])
    signs = np.where(pairs[:, :, 0] < pairs[:, :, 1], 1, -1).astype(np.int8)
    t = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
    return EdgeDofMap(edges, inverse.reshape(-1, 6), signs, t, np.linalg.norm(t, axis=1),
                      mesh.n_nodes)


# ---------------------------------------------------------------------------
# element geometry


def _moment_tensors():
    # reference-tet moments of products of barycentric coordinates
    bary, w = tetrahedron_rule(4)
    i2 = np.einsum("q,qa,qb->ab", w, bary, bary)
    i3 = np.einsum("q,qa,qb,qc->abc", w, bary, bary, bary)
    return i2, i3


@dataclass(eq=False)
class TetGeometry:
    """Per-tet quantities in global edge orientation.

    ``mass3[t, m]`` is the 6x6 mass matrix weighted by the P1 hat of local
    vertex ``m``, so ``M(kappa)_t = sum_m kappa_m mass3[t, m]``.
    """

    grads: np.ndarray
    volumes: np.ndarray
    curls: np.ndarray
    stiffness: np.ndarray
    mass3: np.ndarray
    signs: np.ndarray

    @classmethod
    def build(cls, mesh: Mesh, dof_map: EdgeDofMap):
        p = mesh.nodes[mesh.tets]
        mat = np.ones((mesh.n_tets, 4, 4))
        mat[:, :, 1:] = p
        inv = np.linalg.inv(mat)
        grads = np.transpose(inv[:, 1:, :], (0, 2, 1))  # (M, 4, 3)
        vol = np.abs(np.linalg.det(mat)) / 6.0
        s = dof_map.tet_signs.astype(float)
        i, j = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
        curls = 2.0 * np.cross(grads[:, i], grads[:, j]) * s[:, :, None]
        stiff = vol[:, None, None] * np.einsum("tax,tbx->tab", curls, curls)

        _, i3 = _moment_tensors()
        g = np.einsum("tpx,tqx->tpq", grads, grads)
        mass3 = np.empty((mesh.n_tets, 4, 6, 6))
        for a, (ia, ja) in enumerate(LOCAL_EDGES):
            for b, (ib, jb) in enumerate(LOCAL_EDGES):
                if b < a:
                    continue
                v = (np.outer(g[:, ja, jb], i3[:, ia, ib]) - np.outer(g[:, ja, ib], i3[:, ia, jb])
                     - np.outer(g[:, ia, jb], i3[:, ja, ib]) + np.outer(g[:, ia, ib], i3[:, ja, jb]))
                v *= (vol * s[:, a] * s[:, b])[:, None]
                mass3[:, :, a, b] = v
                mass3[:, :, b, a] = v
        return cls(grads, vol, curls, stiff, mass3, s)

    def basis(self, tets, bary):
        """Global-orientation Whitney functions ``(T, Q, 6, 3)`` at barycentric points.

        `bary` is ``(Q, 4)`` shared by all tets or ``(T, Q, 4)``.
        """
        g = self.grads[tets]
        bary = np.broadcast_to(bary, (len(tets),) + np.shape(bary)[-2:])
        i, j = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
        w = (bary[:, :, i, None] * g[:, None, j, :] - bary[:, :, j, None] * g[:, None, i, :])
        return w * self.signs[tets][:, None, :, None]


_GEOMETRY = weakref.WeakKeyDictionary()


def tet_geometry(mesh: Mesh, dof_map: EdgeDofMap) -> TetGeometry:
    """Cached :class:`TetGeometry` for a mesh/DoF-map pair."""
    if dof_map.tet_edges.shape[0] != mesh.n_tets or dof_map.n_nodes != mesh.n_nodes:
        raise AssemblyError("DoF map does not match the mesh")
    geo = _GEOMETRY.get(dof_map)
    if geo is None:
        geo = _GEOMETRY[dof_map] = TetGeometry.build(mesh, dof_map)
    return geo


def physical_points(mesh: Mesh, tets, bary):
    """Points ``(T, Q, 3)`` of barycentric coordinates in the given tets."""
    p = mesh.nodes[mesh.tets[tets]]
    if np.ndim(bary) == 2:
        return np.einsum("qa,tax->tqx", bary, p)
    return np.einsum("tqa,tax->tqx", bary, p)


# ---------------------------------------------------------------------------
# surface terms


@dataclass(eq=False)
class FaceSet:
    """Faces given by an owning tet and a local face index, with quadrature data."""

    tets: np.ndarray
    local: np.ndarray
    areas: np.ndarray
    normals: np.ndarray
    bary: np.ndarray  # (F, Q, 4) barycentric coordinates in the owning tet
    weights: np.ndarray  # (Q,)

    @classmethod
    def build(cls, mesh: Mesh, tets, local, degree=4):
        tets = np.asarray(tets, dtype=np.int64)
        local = np.asarray(local, dtype=np.int64)
        tb, w = triangle_rule(degree)
        bary = np.zeros((len(tets), len(w), 4))
        for f in range(4):
            sel = local == f
            bary[np.ix_(sel, np.arange(len(w)), TET_FACES[f])] = tb[None, :, :]
        tri = mesh.tets[tets[:, None], TET_FACES[local]]
        p = mesh.nodes
        cr = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
        areas = 0.5 * np.linalg.norm(cr, axis=1)
        normals = outward_normals(mesh, tets, local) if len(tets) else np.zeros((0, 3))
        return cls(tets, local, areas, normals, bary, np.asarray(w))

    def __len__(self):
        return len(self.tets)

    def points(self, mesh: Mesh):
        return physical_points(mesh, self.tets, self.bary)

    def tangential_basis(self, geo: TetGeometry):
        """Tangential traces ``(F, Q, 3, 3)`` of the three face edges and their local ids."""
        w = geo.basis(self.tets, self.bary)
        ids = FACE_EDGES[self.local]  # (F, 3)
        w = np.take_along_axis(w, ids[:, None, :, None], axis=2)
        n = self.normals[:, None, None, :]
        return w - np.sum(w * n, axis=-1, keepdims=True) * n, ids


def surface_triplets(mesh, dof_map, geo, faces: FaceSet, coeff):
    """COO triplets of ``sum_f coeff_f * int_f (w_a x n).(w_b x n)``."""
    if len(faces) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, complex)
    wt, ids = faces.tangential_basis(geo)
    loc = np.einsum("q,fqax,fqbx->fab", faces.weights, wt, wt) * faces.areas[:, None, None]
    loc = loc * np.asarray(coeff)[:, None, None]
    g = np.take_along_axis(dof_map.tet_edges[faces.tets], ids, axis=1)
    rows = np.broadcast_to(g[:, :, None], loc.shape)
    cols = np.broadcast_to(g[:, None, :], loc.shape)
    return rows.ravel(), cols.ravel(), loc.ravel()


def boundary_faces(mesh: Mesh, select):
    """FaceSet of the tagged boundary triangles where ``select(tags)`` holds."""
    topo = mesh.topology
    idx = np.flatnonzero(select(mesh.tri_tags))
    fid = topo.lookup(mesh.tris[idx])
    return FaceSet.build(mesh, topo.face_tets[fid, 0], topo.face_local[fid, 0]), idx


def metal_dofs(mesh: Mesh, dof_map: EdgeDofMap):
    """Sorted ids of edges lying on a metallic boundary face."""
    tri = mesh.tris[mesh.tri_tags == METAL]
    if len(tri) == 0:
        return np.zeros(0, dtype=np.int64)
    a = tri[:, [0, 1, 2]].ravel()
    b = tri[:, [1, 2, 0]].ravel()
    return np.unique(dof_map.lookup(a, b))


# ---------------------------------------------------------------------------
# volume operator


def volume_triplets(dof_map: EdgeDofMap, geo: TetGeometry, kappa_tet, tets=None):
    """COO triplets of ``K - M(kappa)`` restricted to `tets` (all by default)."""
    if tets is None:
        tets = np.arange(len(geo.volumes))
    loc = geo.stiffness[tets] - np.einsum("tm,tmab->tab", kappa_tet[tets], geo.mass3[tets])
    g = dof_map.tet_edges[tets]
    rows = np.broadcast_to(g[:, :, None], loc.shape)
    cols = np.broadcast_to(g[:, None, :], loc.shape)
    return rows.ravel(), cols.ravel(), loc.ravel()


def to_csr(n, *triplets):
    rows = np.concatenate([t[0] for t in triplets])
    cols = np.concatenate([t[1] for t in triplets])
    vals = np.concatenate([np.asarray(t[2], dtype=complex) for t in triplets])
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


# ---------------------------------------------------------------------------
# ports


@dataclass(eq=False)
class PortMode:
    """TE10 mode of one port: ``E0(xi, eta) = amplitude * sin(pi xi / width) * eta_axis``.

    ``xi`` is measured from ``origin`` along ``xi_axis``. The port triangles
    and their quadrature data live in ``faces``; ``norm2`` is the quadrature
    value of ``int |E0|^2`` over them and ``projection`` the vector
    ``int w_e . E0`` over all global edges.
    """

    tag: int
    origin: np.ndarray
    xi_axis: np.ndarray
    eta_axis: np.ndarray
    normal: np.ndarray
    width: float
    height: float
    amplitude: float
    faces: FaceSet | None = None
    norm2: float = float("nan")
    projection: np.ndarray | None = field(default=None, repr=False)

    def evaluate(self, x):
        xi = (np.asarray(x) - self.origin) @ self.xi_axis
        return (self.amplitude * np.sin(math.pi * xi / self.width))[..., None] * self.eta_axis

    @property
    def analytic_norm2(self):
        return abs(self.amplitude) ** 2 * self.width * self.height / 2.0


def port_frame(mesh: Mesh, tag: int):
    """Planar frame fitted to the triangles of port `tag`.

    Returns ``(origin, xi_axis, eta_axis, normal, width, height)``; the wider
    in-plane extent is the ``xi`` (broad-wall) direction and
    ``(xi, eta, normal)`` is right-handed with the normal pointing outward.
    """
    sel = mesh.tri_tags == tag
    if not sel.any():
        raise AssemblyError(f"port {tag} has no triangles")
    tri = mesh.tris[sel]
    p = mesh.nodes
    cr = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
    topo = mesh.topology
    fid = topo.lookup(tri)
    nrm = outward_normals(mesh, topo.face_tets[fid, 0], topo.face_local[fid, 0])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    n = (nrm * area[:, None]).sum(axis=0)
    n /= np.linalg.norm(n)
    verts = p[np.unique(tri)]
    c = verts.mean(axis=0)
    d = verts - c
    d_in = d - np.outer(d @ n, n)
    _, _, vt = np.linalg.svd(d_in, full_matrices=False)
    ax = [v - (v @ n) * n for v in vt[:2]]
    ax = [v / np.linalg.norm(v) for v in ax]
    ext = [np.ptp(d @ v) for v in ax]
    xi, eta = (ax[0], ax[1]) if ext[0] >= ext[1] else (ax[1], ax[0])
    k = int(np.argmax(np.abs(eta)))
    if eta[k] < 0:
        eta = -eta
    xi = np.cross(eta, n)
    xi /= np.linalg.norm(xi)
    s_xi = d @ xi
    s_eta = d @ eta
    origin = c + s_xi.min() * xi + s_eta.min() * eta
    return origin, xi, eta, n, float(np.ptp(s_xi)), float(np.ptp(s_eta))


def te10_mode(mesh: Mesh, tag: int, params: PhysicsParams, amplitude=None, dof_map=None):
    """TE10 mode on port `tag` and the propagation wavenumber beta.

    With a `dof_map` the mode also carries its quadrature norm and the edge
    projection vector used by the excitation and the S-parameters.
    """
    beta = params.beta
    amp = params.amplitude if amplitude is None else amplitude
    origin, xi, eta, n, width, height = port_frame(mesh, tag)
    mode = PortMode(tag, origin, xi, eta, n, width, height, amp)
    faces, _ = boundary_faces(mesh, lambda t: t == tag)
    mode.faces = faces
    x = faces.points(mesh)
    e0 = mode.evaluate(x)
    wq = faces.weights[None, :] * faces.areas[:, None]
    mode.norm2 = float(np.sum(wq * np.sum(np.abs(e0) ** 2, axis=-1)))
    if dof_map is not None:
        geo = tet_geometry(mesh, dof_map)
        wt, ids = faces.tangential_basis(geo)
        loc = np.einsum("fq,fqax,fqx->fa", wq, wt, e0)
        g = np.take_along_axis(dof_map.tet_edges[faces.tets], ids, axis=1)
        mode.projection = np.bincount(g.ravel(), loc.ravel(), minlength=dof_map.n_dofs)
    return mode, beta


# ---------------------------------------------------------------------------
# global system


@dataclass(eq=False)
class ComplexSparseSystem:
    """Reduced system ``A x = B`` on the DoFs not fixed by metallic walls.

    ``free`` maps reduced to full edge numbering; ``B[:, j]`` excites port
    ``port_tags[j]``.
    """

    A: sp.csr_matrix
    B: np.ndarray
    free: np.ndarray
    n_full: int
    port_tags: list
    modes: list
    beta: complex

    @property
    def n(self):
        return self.A.shape[0]

    def expand(self, x):
        """Full-numbering copy of reduced vector(s), zero on metallic DoFs."""
        x = np.asarray(x)
        out = np.zeros((self.n_full,) + x.shape[1:], dtype=complex)
        out[self.free] = x
        return out

    def restrict(self, x):
        return np.asarray(x)[self.free]


def system_faces(mesh: Mesh):
    """Impedance faces of the global problem (ports and absorbing surfaces)."""
    return boundary_faces(mesh, lambda t: t != METAL)


def assemble_system(mesh: Mesh, dof_map: EdgeDofMap, material: MaterialField,
                    params: PhysicsParams, ports=None, modes=None) -> ComplexSparseSystem:
    """Assemble the reduced complex-symmetric system and one RHS per port.

    Metallic-wall DoFs are removed symmetrically. Port and absorbing faces
    carry ``i*beta * int (E x n).(v x n)``; port ``j`` is excited by
    ``g_j = 2 i beta E0_j``, which is ``(curl E0) x n + i beta n x (E0 x n)``
    for the incoming TE10 wave.
    """
    geo = tet_geometry(mesh, dof_map)
    kap = kappa_per_tet(mesh, material, params)
    beta = params.beta
    ports = mesh.port_tags if ports is None else list(ports)
    if modes is None:
        modes = [te10_mode(mesh, t, params, dof_map=dof_map)[0] for t in ports]
    faces, _ = system_faces(mesh)
    n = dof_map.n_dofs
    A = to_csr(n, volume_triplets(dof_map, geo, kap),
               surface_triplets(mesh, dof_map, geo, faces, np.full(len(faces), 1j * beta)))
    COUNTERS["assemble_system"] += 1
    fixed = metal_dofs(mesh, dof_map)
    free = np.setdiff1d(np.arange(n), fixed)
    A = A[free][:, free].tocsr()
    A.sort_indices()
    B = np.zeros((len(free), len(modes)), dtype=complex)
    for j, mode in enumerate(modes):
        B[:, j] = 2j * beta * mode.projection[free]
    return ComplexSparseSystem(A, B, free, n, ports, modes, beta)


# ---------------------------------------------------------------------------
# interpolation, sources and errors


def circulations_of(field, dof_map: EdgeDofMap, nodes):
    """Edge DoFs ``(1/|e|) int_e E . t_e`` by 2-point Gauss on each edge."""
    s, w = gauss_legendre01(2)
    x0 = nodes[dof_map.edges[:, 0]]
    t = dof_map.tangents
    out = 0.0
    for sk, wk in zip(s, w):
        out = out + wk * np.einsum("ex,ex->e", field(x0 + sk * t), t)
    return out


def evaluate_field(u, dof_map: EdgeDofMap, geo: TetGeometry, tets, bary):
    """Discrete field ``(T, Q, 3)`` of full-numbering DoF vector `u`."""
    w = geo.basis(tets, bary)
    c = np.asarray(u)[dof_map.tet_edges[tets]]
    return np.einsum("ta,tqax->tqx", c, w)


def _chunks(n, size=4096):
    for s in range(0, n, size):
        yield np.arange(s, min(n, s + size))


def assemble_volume_source(mesh: Mesh, dof_map: EdgeDofMap, source, degree=4):
    """Load vector ``int J . w_e`` in full numbering.

    `source` is a callable of points ``(..., 3)`` or an array of its values
    ``(M, Q, 3)`` at the points of the degree-4 tetrahedron rule.
    """
    geo = tet_geometry(mesh, dof_map)
    bary, w = tetrahedron_rule(degree)
    out = np.zeros(dof_map.n_dofs, dtype=complex)
    for idx in _chunks(mesh.n_tets):
        if callable(source):
            j = source(physical_points(mesh, idx, bary))
        else:
            j = np.asarray(source)[idx]
        if not np.any(j):
            continue
        loc = np.einsum("q,tqax,tqx->ta", w, geo.basis(idx, bary), j) * geo.volumes[idx, None]
        out += np.bincount(dof_map.tet_edges[idx].ravel(), loc.real.ravel(), minlength=len(out))
        out += 1j * np.bincount(dof_map.tet_edges[idx].ravel(), loc.imag.ravel(),
                                minlength=len(out))
    return out


def hcurl_error(u, field, curl_field, mesh: Mesh, dof_map: EdgeDofMap, degree=4):
    """``(||E_h - E||_L2, ||curl E_h - curl E||_L2)`` by degree-4 volume quadrature."""
    geo = tet_geometry(mesh, dof_map)
    bary, w = tetrahedron_rule(degree)
    e2 = c2 = 0.0
    u = np.asarray(u)
    for idx in _chunks(mesh.n_tets):
        x = physical_points(mesh, idx, bary)
        eh = evaluate_field(u, dof_map, geo, idx, bary)
        ch = np.einsum("ta,tax->tx", u[dof_map.tet_edges[idx]], geo.curls[idx])
        de = np.sum(np.abs(eh - field(x)) ** 2, axis=-1)
        dc = np.sum(np.abs(ch[:, None, :] - curl_field(x)) ** 2, axis=-1)
        e2 += np.sum(geo.volumes[idx] * (de @ w))
        c2 += np.sum(geo.volumes[idx] * (dc @ w))
    return math.sqrt(e2), math.sqrt(c2)


def p1_stiffness(mesh: Mesh, tets=None):
    """Scalar P1 stiffness ``int grad phi_m . grad phi_n`` over `tets`."""
    if tets is None:
        tets = np.arange(mesh.n_tets)
    p = mesh.nodes[mesh.tets[tets]]
    mat = np.ones((len(tets), 4, 4))
    mat[:, :, 1:] = p
    inv = np.linalg.inv(mat)
    g = np.transpose(inv[:, 1:, :], (0, 2, 1))
    vol = np.abs(np.linalg.det(mat)) / 6.0
    loc = vol[:, None, None] * np.einsum("tax,tbx->tab", g, g)
    t = mesh.tets[tets]
    rows = np.broadcast_to(t[:, :, None], loc.shape).ravel()
    cols = np.broadcast_to(t[:, None, :], loc.shape).ravel()
    K = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    K.sum_duplicates()
    return K
