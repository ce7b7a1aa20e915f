"""Tetrahedral meshes, MSH-lite I/O, chamber generation and overlapping decompositions.

Surface tags on boundary triangles:

* ``0``  metallic wall (tangential field vanishes)
* ``i >= 1``  section of port ``i``
* ``-1``  absorbing (impedance) surface without excitation

Region tags on tetrahedra: ``0`` imaging region, ``1`` fixed background
(for instance the ceramic filling of a waveguide).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import permutations
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

METAL = 0
ABSORBING = -1

#: local vertex triples of the four faces; face ``f`` is opposite vertex ``f``
TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


class MeshError(ValueError):
    """Raised for malformed mesh files and violated mesh invariants."""


@dataclass(eq=False)
class Mesh:
    """Tetrahedral mesh with region and boundary-surface tags.

    Parameters
    ----------
    nodes : (N, 3) float array
        Node coordinates in meters.
    tets : (M, 4) int array
        Node indices of each tetrahedron, positively oriented.
    regions : (M,) int array
        Region tag per tetrahedron.
    tris : (K, 3) int array
        Node indices of the tagged boundary triangles.
    tri_tags : (K,) int array
        Surface tag per boundary triangle.
    meta : dict
        Free-form generator metadata (ring layout of a chamber, ...). Not
        persisted by the MSH-lite writer.
    """

    nodes: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    tris: np.ndarray
    tri_tags: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 3)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.int64).reshape(-1)
        self.tris = np.ascontiguousarray(self.tris, dtype=np.int64).reshape(-1, 3)
        self.tri_tags = np.ascontiguousarray(self.tri_tags, dtype=np.int64).reshape(-1)
        for a in (self.nodes, self.tets, self.regions, self.tris, self.tri_tags):
            a.flags.writeable = False

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def port_tags(self):
        """Sorted positive surface tags present on the boundary."""
        tags = np.unique(self.tri_tags)
        return [int(t) for t in tags if t > 0]

    def signed_volumes(self):
        p = self.nodes[self.tets]
        d = p[:, 1:] - p[:, :1]
        return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0

    @cached_property
    def topology(self) -> "FaceTopology":
        return FaceTopology.build(self)

    def boundary_face_ids(self):
        """Face id (in `topology`) of every tagged boundary triangle."""
        return self.topology.lookup(self.tris)

    def hash(self):
        """Content hash of geometry and tags (hex string)."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.nodes, self.tets, self.regions, self.tris, self.tri_tags):
            h.update(np.ascontiguousarray(a).tobytes())
            h.update(str(a.shape).encode())
        return h.hexdigest()


def _face_keys(sorted_faces, n_nodes):
    sorted_faces = np.asarray(sorted_faces, dtype=np.int64)
    n = np.int64(n_nodes)
    if float(n_nodes) ** 3 < 2.0**62:
        return (sorted_faces[:, 0] * n + sorted_faces[:, 1]) * n + sorted_faces[:, 2]
    view = np.ascontiguousarray(sorted_faces).view(
        np.dtype((np.void, sorted_faces.dtype.itemsize * 3)))
    return view.ravel()


@dataclass(eq=False)
class FaceTopology:
    """All distinct triangular faces of a mesh and their adjacent tetrahedra.

    ``face_tets[f]`` holds up to two tet indices (``-1`` for none) and
    ``face_local[f]`` the local face index within each of them.
    """

    faces: np.ndarray
    face_tets: np.ndarray
    face_local: np.ndarray
    tet_faces: np.ndarray
    _keys: np.ndarray
    _n_nodes: int

    @classmethod
    def build(cls, mesh: Mesh):
        m = mesh.n_tets
        all_faces = np.sort(mesh.tets[:, TET_FACES].reshape(-1, 3), axis=1)
        keys = _face_keys(all_faces, mesh.n_nodes)
        uniq, first, inverse, counts = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            bad = int(np.flatnonzero(counts[inverse] > 2)[0] // 4)
            raise MeshError(f"tet {bad} has a face shared by more than two tets")
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        face_tets = -np.ones((len(uniq), 2), dtype=np.int64)
        face_local = -np.ones((len(uniq), 2), dtype=np.int64)
        slot = np.zeros(len(inverse), dtype=np.int64)
        sorted_inv = inverse[order]
        dup = np.r_[False, sorted_inv[1:] == sorted_inv[:-1]]
        slot[order[dup]] = 1
        face_tets[inverse, slot] = np.arange(4 * m) // 4
        face_local[inverse, slot] = np.arange(4 * m) % 4
        return cls(all_faces[first], face_tets, face_local,
                   inverse.reshape(m, 4), uniq, mesh.n_nodes)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def boundary(self):
        """Boolean mask of faces belonging to exactly one tet."""
        return self.face_tets[:, 1] < 0

    def lookup(self, tris):
        """Face ids of node triples; ``-1`` where the triple is not a face."""
        keys = _face_keys(np.sort(np.asarray(tris).reshape(-1, 3), axis=1), self._n_nodes)
        pos = np.searchsorted(self._keys, keys)
        pos = np.clip(pos, 0, len(self._keys) - 1)
        found = self._keys[pos] == keys
        return np.where(found, pos, -1)


def validate_mesh(mesh: Mesh, rel_tol=1e-12):
    """Check every mesh invariant; raise :class:`MeshError` naming the first failure.

    Negatively oriented tetrahedra are not accepted here: use
    :func:`orient_tets` first (the loader does).
    """
    n = mesh.n_nodes
    if mesh.n_tets == 0:
        raise MeshError("mesh has no tets")
    if len(mesh.regions) != mesh.n_tets:
        raise MeshError("region tag count does not match tet count")
    if len(mesh.tri_tags) != len(mesh.tris):
        raise MeshError("surface tag count does not match boundary triangle count")
    for name, conn in (("tet", mesh.tets), ("boundary triangle", mesh.tris)):
        bad = np.flatnonzero((conn < 0).any(axis=1) | (conn >= n).any(axis=1))
        if bad.size:
            raise MeshError(f"{name} {bad[0]} references a missing node")
        srt = np.sort(conn, axis=1)
        rep = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
        if rep.size:
            raise MeshError(f"{name} {rep[0]} repeats a node")

    vol = mesh.signed_volumes()
    scale = _tet_scale(mesh)
    bad = np.flatnonzero(vol <= rel_tol * scale)
    if bad.size:
        raise MeshError(f"tet {bad[0]} has non-positive volume")

    topo = mesh.topology
    ids = topo.lookup(mesh.tris)
    ok = ids >= 0
    ok[ok] = topo.boundary[ids[ok]]
    if not ok.all():
        k = int(np.flatnonzero(~ok)[0])
        raise MeshError(f"boundary triangle {k} is not a face of exactly one tet")
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise MeshError(f"boundary face {mesh.tris[np.flatnonzero(ids == uniq[counts > 1][0])[0]].tolist()} "
                        "tagged more than once")
    if len(uniq) != int(topo.boundary.sum()):
        missing = np.setdiff1d(np.flatnonzero(topo.boundary), uniq)[0]
        raise MeshError(f"uncovered boundary face {topo.faces[missing].tolist()}")
    return mesh


def _tet_scale(mesh):
    p = mesh.nodes[mesh.tets]
    d = p[:, [1, 2, 3, 2, 3, 3]] - p[:, [0, 0, 0, 1, 1, 2]]
    return np.max(np.einsum("ijk,ijk->ij", d, d), axis=1) ** 1.5


def orient_tets(nodes, tets):
    """Return a copy of `tets` with two vertices swapped where the volume is negative."""
    tets = np.array(tets, dtype=np.int64, copy=True)
    p = np.asarray(nodes)[tets]
    d = p[:, 1:] - p[:, :1]
    vol = np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2]))
    neg = vol < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return tets


# ---------------------------------------------------------------------------
# MSH-lite I/O


def _section(lines, pos, header, width, path):
    lineno = pos + 1
    if pos >= len(lines) or lines[pos].strip() != header:
        raise MeshError(f"{path}:{lineno}: expected '{header}'")
    try:
        count = int(lines[pos + 1].split()[0])
    except (IndexError, ValueError):
        raise MeshError(f"{path}:{lineno + 1}: expected entry count after {header}") from None
    if count < 0:
        raise MeshError(f"{path}:{lineno + 1}: negative entry count")
    rows = []
    for k in range(count):
        ln = pos + 2 + k
        if ln >= len(lines):
            raise MeshError(f"{path}:{ln + 1}: unexpected end of file in {header}")
        parts = lines[ln].split()
        if len(parts) != width:
            raise MeshError(f"{path}:{ln + 1}: expected {width} fields, got {len(parts)}")
        rows.append((ln + 1, parts))
    return rows, pos + 2 + count


def _ids(rows, header, path):
    ids = []
    for lineno, parts in rows:
        try:
            ids.append(int(parts[0]))
        except ValueError:
            raise MeshError(f"{path}:{lineno}: invalid id '{parts[0]}'") from None
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise MeshError(f"{path}: {header} ids must be 1..{len(ids)}")
    return np.array(ids) - 1


def _ints(rows, cols, path):
    out = np.empty((len(rows), len(cols)), dtype=np.int64)
    for r, (lineno, parts) in enumerate(rows):
        try:
            out[r] = [int(parts[c]) for c in cols]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: expected integers") from None
    return out


def load_mesh(path) -> Mesh:
    """Read an MSH-lite file, re-orient tets positively and validate.

    Node references in the file are 1-based; the returned mesh is 0-based.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines()]
    # blank lines are only tolerated at the end of the file
    while lines and not lines[-1].strip():
        lines.pop()
    node_rows, pos = _section(lines, 0, "$Nodes", 4, path)
    tet_rows, pos = _section(lines, pos, "$Tets", 6, path)
    tri_rows, pos = _section(lines, pos, "$BoundaryTris", 5, path)
    if pos != len(lines):
        raise MeshError(f"{path}:{pos + 1}: trailing content after $BoundaryTris")

    order = _ids(node_rows, "$Nodes", path)
    nodes = np.empty((len(node_rows), 3))
    for (lineno, parts), i in zip(node_rows, order):
        try:
            nodes[i] = [float(v) for v in parts[1:]]
        except ValueError:
            raise MeshError(f"{path}:{lineno}: invalid coordinate") from None

    tet_order = _ids(tet_rows, "$Tets", path)
    tet_data = np.empty((len(tet_rows), 5), dtype=np.int64)
    tet_data[tet_order] = _ints(tet_rows, [1, 2, 3, 4, 5], path)
    tri_order = _ids(tri_rows, "$BoundaryTris", path)
    tri_data = np.empty((len(tri_rows), 4), dtype=np.int64)
    tri_data[tri_order] = _ints(tri_rows, [1, 2, 3, 4], path)

    tets = tet_data[:, :4] - 1
    tris = tri_data[:, :3] - 1
    n = len(nodes)
    for name, conn in (("tet", tets), ("boundary triangle", tris)):
        bad = np.flatnonzero((conn < 0).any(axis=1) | (conn >= n).any(axis=1))
        if bad.size:
            raise MeshError(f"{name} {bad[0]} references a missing node")
    mesh = Mesh(nodes, orient_tets(nodes, tets), tet_data[:, 4], tris, tri_data[:, 3])
    return validate_mesh(mesh)


def write_mesh(mesh: Mesh, path):
    """Write `mesh` in MSH-lite format with 17 significant digits."""
    out = ["$Nodes", str(mesh.n_nodes)]
    out += [f"{i + 1} {x:.17g} {y:.17g} {z:.17g}" for i, (x, y, z) in enumerate(mesh.nodes.tolist())]
    out += ["$Tets", str(mesh.n_tets)]
    out += [f"{i + 1} {a + 1} {b + 1} {c + 1} {d + 1} {r}"
            for i, ((a, b, c, d), r) in enumerate(zip(mesh.tets.tolist(), mesh.regions.tolist()))]
    out += ["$BoundaryTris", str(len(mesh.tris))]
    out += [f"{i + 1} {a + 1} {b + 1} {c + 1} {t}"
            for i, ((a, b, c), t) in enumerate(zip(mesh.tris.tolist(), mesh.tri_tags.tolist()))]
    Path(path).write_text("\n".join(out) + "\n")


def mesh_from_tets(nodes, tets, regions=None, tag_boundary=None, meta=None) -> Mesh:
    """Build a validated mesh, extracting boundary triangles automatically.

    `tag_boundary` maps ``(tris, centroids, outward_normals)`` to an integer
    tag array; by default every boundary face is metallic.
    """
    nodes = np.asarray(nodes, dtype=float)
    tets = orient_tets(nodes, tets)
    if regions is None:
        regions = np.zeros(len(tets), dtype=np.int64)
    probe = Mesh(nodes, tets, regions, np.zeros((0, 3)), np.zeros(0))
    topo = probe.topology
    bnd = np.flatnonzero(topo.boundary)
    tris = _outward_tris(nodes, tets, topo, bnd)
    if tag_boundary is None:
        tags = np.full(len(tris), METAL)
    else:
        c = nodes[tris].mean(axis=1)
        nrm = _unit_normals(nodes, tris)
        tags = np.asarray(tag_boundary(tris, c, nrm), dtype=np.int64)
    return validate_mesh(Mesh(nodes, tets, regions, tris, tags, dict(meta or {})))


def _outward_tris(nodes, tets, topo, face_ids):
    # boundary triangles ordered so the right-hand normal points outward
    t = topo.face_tets[face_ids, 0]
    f = topo.face_local[face_ids, 0]
    tris = tets[t[:, None], TET_FACES[f]]
    opp = nodes[tets[t, f]]
    nrm = np.cross(nodes[tris[:, 1]] - nodes[tris[:, 0]], nodes[tris[:, 2]] - nodes[tris[:, 0]])
    flip = np.einsum("ij,ij->i", nrm, opp - nodes[tris[:, 0]]) > 0
    tris[flip, 1], tris[flip, 2] = tris[flip, 2].copy(), tris[flip, 1].copy()
    return tris


def _unit_normals(nodes, tris):
    n = np.cross(nodes[tris[:, 1]] - nodes[tris[:, 0]], nodes[tris[:, 2]] - nodes[tris[:, 0]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def outward_normals(mesh: Mesh, face_tet, face_local):
    """Unit normals of faces pointing out of the given owning tets."""
    tri = mesh.tets[face_tet[:, None], TET_FACES[face_local]]
    p = mesh.nodes
    n = np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
    opp = p[mesh.tets[face_tet, face_local]]
    s = np.sign(np.einsum("ij,ij->i", n, p[tri[:, 0]] - opp))
    return n * (s / np.linalg.norm(n, axis=1))[:, None]


# ---------------------------------------------------------------------------
# generators


def box_mesh(n, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), tag_boundary=None) -> Mesh:
    """Structured box split into cubes of 6 tets sharing the cube diagonal.

    `n` is the number of cells per axis (int or 3-tuple).
    """
    nx, ny, nz = (n, n, n) if np.isscalar(n) else n
    xs = [np.linspace(o, o + L, k + 1) for o, L, k in zip(origin, lengths, (nx, ny, nz))]
    X, Y, Z = np.meshgrid(*xs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    tets = []
    for perm in permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for ax in perm:
            step = path[-1].copy()
            step[ax] += 1
            path.append(step)
        tets.append(np.column_stack([vid(I + s[0], J + s[1], K + s[2]) for s in path]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return mesh_from_tets(nodes, tets, tag_boundary=tag_boundary)


@dataclass(frozen=True)
class ChamberSpec:
    """Cylindrical chamber with rings of rectangular ports on the lateral wall.

    Rings are numbered from the top; antennas within a ring start at
    azimuth 0 and proceed counter-clockwise.
    """

    radius: float = 0.06
    height: float = 0.08
    n_rings: int = 1
    antennas_per_ring: int = 8
    port_width: float = 0.03
    port_height: float = 0.015
    h: float = 0.006

    @property
    def n_ports(self):
        return self.n_rings * self.antennas_per_ring

    @property
    def ring_z(self):
        dz = self.height / (self.n_rings + 1)
        return [self.height - (r + 1) * dz for r in range(self.n_rings)]

    def check(self):
        if not (self.radius > 0 and self.height > 0):
            raise MeshError("chamber radius and height must be positive")
        if self.n_rings < 1 or self.antennas_per_ring < 1:
            raise MeshError("chamber needs at least one ring and one antenna per ring")
        if not (self.port_width > 0 and self.port_height > 0 and self.h > 0):
            raise MeshError("port size and mesh size must be positive")
        spacing = 2 * math.pi * self.radius / self.antennas_per_ring
        if self.port_width >= spacing:
            raise MeshError(f"ports overlap: port_width {self.port_width} >= azimuthal "
                            f"spacing {spacing:.6g}")
        ring_gap = self.height / (self.n_rings + 1)
        if self.port_height >= ring_gap:
            raise MeshError(f"ports overlap: port_height {self.port_height} >= ring "
                            f"spacing {ring_gap:.6g}")
        if self.h > 0.5 * min(self.radius, self.height):
            raise MeshError(f"mesh size h={self.h} too coarse for the chamber")


def _fill(levels, h):
    # subdivide consecutive required levels so no gap exceeds h
    out = [levels[0]]
    for a, b in zip(levels[:-1], levels[1:]):
        k = max(1, math.ceil((b - a) / h - 1e-9))
        out.extend(np.linspace(a, b, k + 1)[1:].tolist())
    return np.array(out)


def _dedupe(levels, tol):
    levels = np.sort(np.asarray(levels, dtype=float))
    keep = np.r_[True, np.diff(levels) > tol]
    return levels[keep]


def _disk_triangulation(spec: ChamberSpec):
    R, h = spec.radius, spec.h
    half = spec.port_width / (2 * R)
    centers = 2 * math.pi * np.arange(spec.antennas_per_ring) / spec.antennas_per_ring
    required = np.concatenate([centers - half, centers + half]) % (2 * math.pi)
    required = _dedupe(required, 1e-12)
    ang = []
    for k, a in enumerate(required):
        b = required[(k + 1) % len(required)]
        gap = (b - a) % (2 * math.pi) or 2 * math.pi
        m = max(1, math.ceil(gap * R / h - 1e-9))
        ang.extend((a + gap * np.arange(m) / m).tolist())
    ang = np.array(ang)
    pts = [np.column_stack([R * np.cos(ang), R * np.sin(ang)])]
    n_layers = max(1, math.ceil(R / h - 1e-9))
    for l in range(1, n_layers):
        r = R * l / n_layers
        m = max(6, math.ceil(2 * math.pi * r / h))
        a = 2 * math.pi * (np.arange(m) + 0.5 * (l % 2)) / m
        pts.append(np.column_stack([r * np.cos(a), r * np.sin(a)]))
    pts.append(np.zeros((1, 2)))
    pts = np.vstack(pts)
    tri = Delaunay(pts).simplices
    p = pts[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    tri = tri[np.abs(area) > 1e-12 * h * h]
    return pts, tri


def generate_chamber_mesh(spec: ChamberSpec) -> Mesh:
    """Mesh a metallic cylinder with rectangular ports on its lateral wall.

    The disk cross-section is triangulated with nodes at every port edge and
    extruded through z-levels that include every port edge and the mid-planes
    between rings, so ports and ring cut planes are resolved exactly.
    Lateral and bottom walls are tagged 0, the top -1, port ``r * n_az + k + 1``
    for ring ``r`` and azimuthal index ``k``.
    """
    spec.check()
    pts, tri = _disk_triangulation(spec)
    ring_z = np.array(spec.ring_z)
    cuts = 0.5 * (ring_z[:-1] + ring_z[1:])
    required = np.concatenate([[0.0, spec.height], ring_z - spec.port_height / 2,
                               ring_z + spec.port_height / 2, cuts])
    zs = _fill(_dedupe(required, 1e-12 * spec.height), spec.h)

    n2 = len(pts)
    nodes = np.column_stack([np.tile(pts, (len(zs), 1)), np.repeat(zs, n2)])
    tri = np.sort(tri, axis=1)
    v0, v1, v2 = tri.T
    tets = []
    for layer in range(len(zs) - 1):
        b, t = layer * n2, (layer + 1) * n2
        tets.append(np.column_stack([v0 + b, v1 + b, v2 + b, v0 + t]))
        tets.append(np.column_stack([v1 + b, v2 + b, v0 + t, v1 + t]))
        tets.append(np.column_stack([v2 + b, v0 + t, v1 + t, v2 + t]))
    tets = np.vstack(tets)

    R, H = spec.radius, spec.height
    half = spec.port_width / (2 * R)
    centers = 2 * math.pi * np.arange(spec.antennas_per_ring) / spec.antennas_per_ring
    ztol = 1e-9 * H

    def tagger(tris, c, nrm):
        tags = np.full(len(tris), METAL)
        tags[c[:, 2] > H - ztol] = ABSORBING
        lateral = (c[:, 2] > ztol) & (c[:, 2] < H - ztol)
        phi = np.arctan2(c[:, 1], c[:, 0])
        for r, zc in enumerate(ring_z):
            inz = np.abs(c[:, 2] - zc) < spec.port_height / 2
            for k, th in enumerate(centers):
                d = (phi - th + math.pi) % (2 * math.pi) - math.pi
                sel = lateral & inz & (np.abs(d) < half)
                tags[sel] = r * spec.antennas_per_ring + k + 1
        return tags

    meta = {
        "kind": "chamber",
        "radius": R,
        "height": H,
        "n_rings": spec.n_rings,
        "antennas_per_ring": spec.antennas_per_ring,
        "ring_z": ring_z.tolist(),
        "port_width": spec.port_width,
        "port_height": spec.port_height,
    }
    mesh = mesh_from_tets(nodes, tets, tag_boundary=tagger, meta=meta)
    missing = set(range(1, spec.n_ports + 1)) - set(mesh.port_tags)
    if missing:
        raise MeshError(f"mesh size h={spec.h} too coarse: ports {sorted(missing)} are empty")
    return mesh


# ---------------------------------------------------------------------------
# decomposition


def tet_centroids(mesh: Mesh):
    return mesh.nodes[mesh.tets].mean(axis=1)


def _bisect(ids, cent, parts, first, out):
    if parts == 1:
        out[ids] = first
        return
    c = cent[ids]
    ext = c.max(axis=0) - c.min(axis=0)
    axis = int(np.argmax(ext))  # first maximal axis wins ties: x, then y, then z
    order = ids[np.lexsort((ids, c[:, axis]))]
    left = parts // 2
    cut = int(round(len(ids) * left / parts))
    _bisect(order[:cut], cent, left, first, out)
    _bisect(order[cut:], cent, parts - left, first + left, out)


def face_adjacency(mesh: Mesh):
    """Sparse symmetric tet-tet adjacency through shared faces."""
    ft = mesh.topology.face_tets
    inner = ft[:, 1] >= 0
    a, b = ft[inner, 0], ft[inner, 1]
    m = mesh.n_tets
    g = sp.coo_matrix((np.ones(2 * len(a)), (np.r_[a, b], np.r_[b, a])), shape=(m, m))
    return g.tocsr()


def _greedy(mesh, parts):
    m = mesh.n_tets
    adj = face_adjacency(mesh)
    cent = tet_centroids(mesh)
    out = -np.ones(m, dtype=np.int64)
    remaining = m
    for p in range(parts):
        target = int(round(remaining / (parts - p)))
        free = np.flatnonzero(out < 0)
        seed = free[np.lexsort((free, cent[free, 2], cent[free, 1], cent[free, 0]))[0]]
        members, frontier = [seed], [seed]
        out[seed] = p
        while len(members) < target:
            if not frontier:
                free = np.flatnonzero(out < 0)
                nxt = free[np.lexsort((free, cent[free, 2], cent[free, 1], cent[free, 0]))[0]]
                out[nxt] = p
                members.append(nxt)
                frontier = [nxt]
                continue
            new = []
            for t in frontier:
                for nb in adj.indices[adj.indptr[t]:adj.indptr[t + 1]]:
                    if out[nb] < 0 and len(members) < target:
                        out[nb] = p
                        members.append(nb)
                        new.append(nb)
            frontier = new
        remaining -= len(members)
    return out


def partition(mesh: Mesh, n_subdomains: int, strategy="coordinate-bisection"):
    """Assign every tet to one of `n_subdomains` non-overlapping parts.

    ``coordinate-bisection`` recursively splits tet centroids along the axis
    of largest extent, with part sizes proportional to the number of
    subdomains on each side. ``greedy-graph`` grows parts breadth-first over
    face adjacency from the lowest unassigned tet.
    """
    if not 1 <= n_subdomains <= mesh.n_tets:
        raise ValueError(f"n_subdomains must lie in [1, {mesh.n_tets}], got {n_subdomains}")
    if strategy == "coordinate-bisection":
        out = np.empty(mesh.n_tets, dtype=np.int64)
        _bisect(np.arange(mesh.n_tets), tet_centroids(mesh), n_subdomains, 0, out)
        return out
    if strategy == "greedy-graph":
        return _greedy(mesh, n_subdomains)
    raise ValueError(f"unknown partition strategy {strategy!r}")


@dataclass(frozen=True, eq=False)
class OverlapDecomposition:
    """Overlapping subdomains built from a non-overlapping tet assignment.

    ``inner[i]`` and ``overlap[i]`` are sorted tet index arrays of the
    non-overlapping part and of the part grown by ``delta`` layers.
    ``dofs[i]`` (global edge ids, sorted) and ``weights[i]`` (partition of
    unity) are filled in by :func:`build_partition_of_unity`;
    ``neighbors[i][j]`` holds the local positions of the DoFs shared by
    subdomains ``i`` and ``j`` in each local numbering.
    """

    n_subdomains: int
    delta: int
    assignment: np.ndarray
    inner: list
    overlap: list
    dofs: list | None = None
    weights: list | None = None
    neighbors: list | None = None
    node_weights: list | None = None


def node_tet_incidence(mesh: Mesh):
    m = mesh.n_tets
    rows = np.repeat(np.arange(m), 4)
    return sp.csr_matrix((np.ones(4 * m, dtype=np.int8), (rows, mesh.tets.ravel())),
                         shape=(m, mesh.n_nodes))


def grow_overlap(mesh: Mesh, assignment, delta: int) -> OverlapDecomposition:
    """Grow each part by `delta` layers of node-sharing tets."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (mesh.n_tets,) or assignment.min() < 0:
        raise ValueError("assignment must give a non-negative part for every tet")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    ns = int(assignment.max()) + 1
    inc = node_tet_incidence(mesh)
    inner, over = [], []
    for i in range(ns):
        t0 = np.flatnonzero(assignment == i)
        if t0.size == 0:
            raise ValueError(f"subdomain {i} is empty")
        mask = np.zeros(mesh.n_tets, dtype=bool)
        mask[t0] = True
        for _ in range(delta):
            nodes = np.zeros(mesh.n_nodes, dtype=bool)
            nodes[np.unique(mesh.tets[mask])] = True
            mask |= (inc @ nodes.astype(np.int8)) > 0
        inner.append(t0)
        over.append(np.flatnonzero(mask))
    return OverlapDecomposition(ns, delta, assignment, inner, over)


def build_partition_of_unity(decomp: OverlapDecomposition, mesh: Mesh, dof_map) -> OverlapDecomposition:
    """Attach edge restrictions and partition-of-unity weights to `decomp`.

    Nodal indicator functions of the non-overlapping parts are normalized by
    their sum; each edge DoF takes the value at its midpoint.
    """
    if decomp.delta < 1:
        raise ValueError("partition of unity needs an overlap delta >= 1")
    ns = decomp.n_subdomains
    ind = np.zeros((ns, mesh.n_nodes))
    for i in range(ns):
        ind[i, np.unique(mesh.tets[decomp.inner[i]])] = 1.0
    total = ind.sum(axis=0)
    assert np.all(total >= 1), "every node must belong to some non-overlapping part"
    chi = ind / total
    dofs, weights = [], []
    for i in range(ns):
        d = np.unique(dof_map.tet_edges[decomp.overlap[i]])
        e = dof_map.edges[d]
        dofs.append(d)
        weights.append(0.5 * (chi[i, e[:, 0]] + chi[i, e[:, 1]]))
    neighbors = [dict() for _ in range(ns)]
    for i in range(ns):
        for j in range(i + 1, ns):
            common, li, lj = np.intersect1d(dofs[i], dofs[j], assume_unique=True,
                                            return_indices=True)
            if common.size:
                neighbors[i][j] = (li, lj)
                neighbors[j][i] = (lj, li)
    return replace(decomp, dofs=dofs, weights=weights, neighbors=neighbors,
                   node_weights=[chi[i] for i in range(ns)])
