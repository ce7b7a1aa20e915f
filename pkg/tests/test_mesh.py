import itertools

import numpy as np
import pytest

from maxtomo import mesh as mm
from maxtomo.fem import build_edge_dof_map
from maxtomo.inverse import truncate_for_ring
from maxtomo.mesh import (ABSORBING, METAL, ChamberSpec, Mesh, MeshError, box_mesh,
                          build_partition_of_unity, generate_chamber_mesh, grow_overlap,
                          load_mesh, partition, validate_mesh, write_mesh)


def brute_force_faces(tets):
    """Face -> list of owning tets, by dictionary counting."""
    owners = {}
    for t, tet in enumerate(tets):
        for f in itertools.combinations(sorted(tet), 3):
            owners.setdefault(f, []).append(t)
    return owners


def single_tet():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    return mm.mesh_from_tets(nodes, [[0, 1, 2, 3]])


def test_box_mesh_counts():
    m = box_mesh(1)
    assert (m.n_nodes, m.n_tets, len(m.tris)) == (8, 6, 12)
    assert np.isclose(m.signed_volumes().sum(), 1.0)
    assert np.all(m.signed_volumes() > 0)


def test_topology_matches_brute_force():
    m = box_mesh((2, 3, 2))
    owners = brute_force_faces(m.tets.tolist())
    topo = m.topology
    assert topo.n_faces == len(owners)
    assert int(topo.boundary.sum()) == sum(len(v) == 1 for v in owners.values())
    for f, ft in zip(topo.faces.tolist(), topo.face_tets.tolist()):
        assert sorted(t for t in ft if t >= 0) == sorted(owners[tuple(f)])


def test_boundary_triangles_point_outward():
    m = box_mesh(2)
    c = m.nodes[m.tris].mean(axis=1)
    n = np.cross(m.nodes[m.tris[:, 1]] - m.nodes[m.tris[:, 0]],
                 m.nodes[m.tris[:, 2]] - m.nodes[m.tris[:, 0]])
    assert np.all(np.einsum("ij,ij->i", n, c - 0.5) > 0)


def test_validate_rejects_flat_tet():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    m = Mesh(nodes, [[0, 1, 2, 3]], [0], np.zeros((0, 3)), [])
    with pytest.raises(MeshError, match="non-positive volume"):
        validate_mesh(m)


def test_validate_rejects_uncovered_and_double_tags():
    m = single_tet()
    short = Mesh(m.nodes, m.tets, m.regions, m.tris[:3], m.tri_tags[:3])
    with pytest.raises(MeshError, match="uncovered boundary face"):
        validate_mesh(short)
    dup = Mesh(m.nodes, m.tets, m.regions, np.vstack([m.tris, m.tris[:1]]),
               np.r_[m.tri_tags, 5])
    with pytest.raises(MeshError, match="tagged more than once"):
        validate_mesh(dup)
    bogus = Mesh(m.nodes, m.tets, m.regions, np.vstack([m.tris[:3], [[0, 1, 7]]]),
                 m.tri_tags)
    with pytest.raises(MeshError, match="missing node"):
        validate_mesh(bogus)


def test_msh_roundtrip(tmp_path):
    m = box_mesh(2, tag_boundary=lambda t, c, n: np.where(c[:, 2] > 0.99, 3, METAL))
    p = tmp_path / "box.msh"
    write_mesh(m, p)
    back = load_mesh(p)
    assert np.array_equal(back.nodes, m.nodes)
    assert np.array_equal(back.tets, m.tets)
    assert np.array_equal(back.tri_tags, m.tri_tags)
    assert back.hash() == m.hash()


def test_load_reports_line_numbers(tmp_path):
    p = tmp_path / "bad.msh"
    p.write_text("$Nodes\n1\n1 0 0\n")
    with pytest.raises(MeshError, match=r"bad.msh:3"):
        load_mesh(p)


def test_chamber_ports_and_tags():
    spec = ChamberSpec(h=0.012)
    m = generate_chamber_mesh(spec)
    assert m.port_tags == list(range(1, 9))
    area = {}
    for t in m.port_tags:
        tri = m.tris[m.tri_tags == t]
        p = m.nodes
        area[t] = 0.5 * np.linalg.norm(np.cross(p[tri[:, 1]] - p[tri[:, 0]],
                                                p[tri[:, 2]] - p[tri[:, 0]]), axis=1).sum()
    # flat facets of a cylinder: chord width slightly below the arc width
    for a in area.values():
        assert 0.97 * spec.port_width * spec.port_height < a <= spec.port_width * spec.port_height
    top = m.tris[m.tri_tags == ABSORBING]
    assert np.allclose(m.nodes[top][:, :, 2], spec.height)


def test_chamber_rejects_overlapping_ports():
    with pytest.raises(MeshError, match="ports overlap"):
        generate_chamber_mesh(ChamberSpec(antennas_per_ring=16, port_width=0.03))


@pytest.mark.parametrize("strategy", ["coordinate-bisection", "greedy-graph"])
@pytest.mark.parametrize("ns", [1, 2, 3, 4, 8])
def test_partition_covers_every_tet(strategy, ns):
    m = box_mesh(4)
    a = partition(m, ns, strategy)
    assert a.shape == (m.n_tets,)
    assert sorted(np.unique(a)) == list(range(ns))
    sizes = np.bincount(a)
    assert sizes.max() - sizes.min() <= max(1, m.n_tets // ns // 2)


def test_partition_is_deterministic():
    m = box_mesh(3)
    assert np.array_equal(partition(m, 4), partition(m, 4))


@pytest.mark.parametrize("ns,delta", [(2, 1), (4, 1), (4, 2), (8, 2)])
def test_partition_of_unity_identity(ns, delta):
    m = box_mesh(4)
    dm = build_edge_dof_map(m)
    dec = build_partition_of_unity(grow_overlap(m, partition(m, ns), delta), m, dm)
    total = np.zeros(dm.n_dofs)
    for d, w in zip(dec.dofs, dec.weights):
        np.add.at(total, d, w)
    assert np.max(np.abs(total - 1.0)) <= 1e-14


def test_overlap_layers_grow_by_node_adjacency():
    m = box_mesh(4)
    a = partition(m, 2)
    d0 = grow_overlap(m, a, 0)
    d1 = grow_overlap(m, a, 1)
    for i in range(2):
        assert np.array_equal(d0.overlap[i], d0.inner[i])
        nodes = np.unique(m.tets[d0.inner[i]])
        touching = np.flatnonzero(np.isin(m.tets, nodes).any(axis=1))
        assert np.array_equal(d1.overlap[i], touching)


def test_partition_of_unity_needs_overlap():
    m = box_mesh(2)
    with pytest.raises(ValueError, match="delta"):
        build_partition_of_unity(grow_overlap(m, partition(m, 2), 0), m, build_edge_dof_map(m))


def test_truncation_single_ring_is_identity(small_chamber):
    tm = truncate_for_ring(small_chamber, 0)
    assert tm.mesh.n_tets == small_chamber.n_tets
    assert np.array_equal(np.sort(tm.mesh.tri_tags), np.sort(small_chamber.tri_tags))
    assert tm.transmitters == list(range(8))


def test_truncation_five_rings():
    spec = ChamberSpec(height=0.16, n_rings=5, antennas_per_ring=4, h=0.012)
    m = generate_chamber_mesh(spec)
    with pytest.raises(ValueError):
        truncate_for_ring(m, 5)
    tm = truncate_for_ring(m, 2)
    sub = tm.mesh
    assert tm.rings == [1, 2, 3]
    assert sub.port_tags == list(range(5, 17))
    assert [sub.port_tags[j] for j in tm.transmitters] == [9, 10, 11, 12]
    # surface-tag audit: two disk caps at the ring mid-planes, tagged absorbing
    z = spec.ring_z
    caps = sub.tris[sub.tri_tags == ABSORBING]
    zc = np.sort(np.unique(np.round(sub.nodes[caps][:, :, 2], 12)))
    assert np.allclose(zc, sorted([0.5 * (z[0] + z[1]), 0.5 * (z[3] + z[4])]))
    area = 0.5 * np.linalg.norm(np.cross(sub.nodes[caps[:, 1]] - sub.nodes[caps[:, 0]],
                                         sub.nodes[caps[:, 2]] - sub.nodes[caps[:, 0]]), axis=1)
    disk = np.pi * spec.radius**2
    assert 0.95 * 2 * disk < area.sum() < 2 * disk
    # everything else keeps its original tag
    orig = {tuple(sorted(t)): g for t, g in zip(m.tris.tolist(), m.tri_tags.tolist())}
    for t, g in zip(sub.tris.tolist(), sub.tri_tags.tolist()):
        key = tuple(sorted(tm.node_map[t].tolist()))
        assert orig.get(key, ABSORBING) == g
