"""Synthetic permittivity maps, measurement noise, empty-chamber reference and export."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .fem import MaterialField
from .mesh import Mesh
from .scattering import ScatteringMatrix, read_smatrix_csv, write_smatrix_csv

EPS_GEL = 44 - 20j
EPS_BLOOD = 68 - 44j


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid with semi-axes along the rotated frame ``R = from_euler('zyx', angles)``."""

    center: tuple
    semi_axes: tuple
    angles: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.semi_axes, dtype=float)
        if a.shape != (3,) or np.any(a <= 0):
            raise PhantomError(f"ellipsoid semi-axes must be three positive lengths, got {a}")

    @property
    def rotation(self):
        return Rotation.from_euler("zyx", self.angles)

    def contains(self, x):
        """Boolean mask of points inside or on the ellipsoid."""
        local = self.rotation.inv().apply(np.asarray(x, dtype=float) - self.center)
        return np.sum((local / self.semi_axes) ** 2, axis=-1) <= 1.0

    def surface_points(self, n=24):
        u, v = np.meshgrid(np.linspace(0, 2 * np.pi, n, endpoint=False),
                           np.linspace(0, np.pi, n // 2 + 1))
        p = np.stack([np.cos(u) * np.sin(v), np.sin(u) * np.sin(v), np.cos(v)], axis=-1)
        return self.rotation.apply(p.reshape(-1, 3) * self.semi_axes) + self.center


@dataclass(frozen=True)
class PhantomSpec:
    """Background, optional head ellipsoid and optional stroke ellipsoid.

    ``stroke_rule`` is ``"absolute"`` (use ``stroke_eps``) or
    ``"mean-with-blood"`` (arithmetic mean of the underlying tissue value and
    ``blood_eps``).
    """

    background: complex = EPS_GEL
    head: Ellipsoid | None = None
    head_eps: complex | None = None
    stroke: Ellipsoid | None = None
    stroke_rule: str = "mean-with-blood"
    stroke_eps: complex | None = None
    blood_eps: complex = EPS_BLOOD


def _inside_domain(mesh: Mesh, pts):
    meta = mesh.meta
    if meta.get("kind") == "chamber":
        r = np.hypot(pts[:, 0], pts[:, 1])
        tol = 1e-12 * meta["radius"]
        return (r <= meta["radius"] + tol) & (pts[:, 2] >= -tol) & \
            (pts[:, 2] <= meta["height"] + tol)
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    return np.all((pts >= lo) & (pts <= hi), axis=1)


def _check_ellipsoid(mesh, ell, name):
    if not _inside_domain(mesh, ell.surface_points()).all():
        raise PhantomError(f"{name} ellipsoid extends outside the mesh")
    if not ell.contains(mesh.nodes).any():
        raise PhantomError(f"{name} ellipsoid contains no mesh node")


def build_phantom(spec: PhantomSpec, mesh: Mesh) -> MaterialField:
    """Nodal permittivity of the phantom on `mesh`."""
    eps = np.full(mesh.n_nodes, complex(spec.background))
    if spec.head is not None:
        if spec.head_eps is None:
            raise PhantomError("head ellipsoid given without head_eps")
        _check_ellipsoid(mesh, spec.head, "head")
        eps[spec.head.contains(mesh.nodes)] = complex(spec.head_eps)
    if spec.stroke is not None:
        _check_ellipsoid(mesh, spec.stroke, "stroke")
        inside = spec.stroke.contains(mesh.nodes)
        if spec.stroke_rule == "mean-with-blood":
            eps[inside] = 0.5 * (eps[inside] + complex(spec.blood_eps))
        elif spec.stroke_rule == "absolute":
            if spec.stroke_eps is None:
                raise PhantomError("absolute stroke rule needs stroke_eps")
            eps[inside] = complex(spec.stroke_eps)
        else:
            raise PhantomError(f"unknown stroke rule {spec.stroke_rule!r}")
    if np.any(eps.imag > 0):
        raise PhantomError("phantom has Im(eps_r) > 0 (active medium)")
    return MaterialField(eps)


def add_noise(S: ScatteringMatrix, level, seed) -> ScatteringMatrix:
    """Independent Gaussian noise of std ``level * |S_ij|`` on Re and Im of each entry.

    Entries are visited in (tx, rx) order; draws come from ``default_rng(seed)``.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    out = S.copy(provenance="synthetic-noisy")
    if level == 0:
        return out
    rng = np.random.default_rng(seed)
    tx, rx = np.nonzero(S.mask.T)  # row-major over (tx, rx)
    v = S.values[rx, tx]
    z = rng.standard_normal((len(v), 2))
    sig = level * np.abs(v)
    out.values[rx, tx] = v + sig * z[:, 0] + 1j * sig * z[:, 1]
    return out


def reference_key(mesh: Mesh, eps, params, transmitters=None):
    h = hashlib.sha256()
    h.update(mesh.hash().encode())
    h.update(np.ascontiguousarray(np.asarray(eps, dtype=complex)).tobytes())
    h.update(repr((params.frequency, complex(params.eps_ceramic), params.port_width,
                   params.port_height, params.amplitude,
                   None if transmitters is None else list(transmitters))).encode())
    return h.hexdigest()[:32]


def empty_reference(model, gel=EPS_GEL, cache_dir=None) -> ScatteringMatrix:
    """S-matrix of the chamber filled with uniform gel, cached on disk.

    The cache key covers the mesh content, the permittivity field, the
    frequency and the port physics.
    """
    mesh = model.mesh
    field = MaterialField.uniform(mesh, gel)
    path = None
    if cache_dir is not None:
        key = reference_key(mesh, field.eps, model.params, model.transmitters)
        path = Path(cache_dir) / f"empty-{key}.csv"
        if path.exists():
            return read_smatrix_csv(path, model.n_ports, "empty-reference",
                                    model.params.frequency, model.ports)
    S = model.forward(field).smatrix.copy(provenance="empty-reference")
    if path is not None:
        os.makedirs(path.parent, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        write_smatrix_csv(S, tmp)
        os.replace(tmp, path)
    return S


def write_vtk(mesh: Mesh, path, fields=None, title="maxtomo"):
    """Legacy ASCII VTK unstructured grid with nodal scalar arrays."""
    fields = dict(fields or {})
    for name, arr in fields.items():
        if np.shape(arr) != (mesh.n_nodes,):
            raise ValueError(f"field {name!r} has shape {np.shape(arr)}, "
                             f"expected ({mesh.n_nodes},)")
        if np.iscomplexobj(arr):
            raise ValueError(f"field {name!r} is complex; split it into real arrays")
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for p in mesh.nodes:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        for t in mesh.tets:
            fh.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        fh.write("10\n" * mesh.n_tets)
        if fields:
            fh.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, arr in fields.items():
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("".join(f"{v:.17g}\n" for v in np.asarray(arr, dtype=float)))


def eps_fields(eps):
    eps = np.asarray(eps)
    return {"eps_re": eps.real, "eps_im": eps.imag}


def read_nodal_csv(path, n_nodes, default=EPS_GEL) -> MaterialField:
    """Nodal permittivity from ``node_id,re,im`` lines; unlisted nodes get `default`."""
    eps = np.full(n_nodes, complex(default))
    seen = np.zeros(n_nodes, dtype=bool)
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != "node_id,re,im":
            raise ValueError(f"{path}: expected header node_id,re,im, got {header!r}")
        for ln, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                k, re, im = line.split(",")
                k = int(k)
                val = complex(float(re), float(im))
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: malformed line {line.strip()!r}") from exc
            if not 0 <= k < n_nodes:
                raise ValueError(f"{path}:{ln}: node {k} outside 0..{n_nodes - 1}")
            if seen[k]:
                raise ValueError(f"{path}:{ln}: node {k} listed twice")
            seen[k] = True
            eps[k] = val
    return MaterialField(eps)


def write_nodal_csv(field: MaterialField, path):
    with open(path, "w") as fh:
        fh.write("node_id,re,im\n")
        for k, v in enumerate(field.eps):
            fh.write(f"{k},{v.real:.17g},{v.imag:.17g}\n")


def anomaly_center(mesh: Mesh, eps, background, threshold=0.5):
    """Centre of mass of the loss anomaly ``-(Im eps - Im background)``.

    Nodes whose anomaly reaches `threshold` times its maximum are weighted by
    anomaly times lumped nodal volume. Returns ``(center, peak)``.
    """
    a = -(np.asarray(eps).imag - np.imag(background))
    peak = float(a.max())
    if peak <= 0:
        return None, peak
    vol = np.abs(mesh.signed_volumes())
    nodal = np.bincount(mesh.tets.ravel(), np.repeat(vol / 4, 4), minlength=mesh.n_nodes)
    w = np.where(a >= threshold * peak, a, 0.0) * nodal
    return (w @ mesh.nodes) / w.sum(), peak
