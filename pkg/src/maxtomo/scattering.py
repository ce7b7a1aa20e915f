"""S-parameters from solved fields, row normalization and dB conversion.

For a field ``E_j`` radiated by transmitter ``j`` the coefficient seen by
receiver ``i`` is

    S_ij = int_{Gamma_i} conj(E_j) . E0_i  /  int_{Gamma_i} |E0_i|^2
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fem import PortMode

PROVENANCES = ("simulated", "synthetic-noisy", "empty-reference", "measured")


class ScatteringError(ValueError):
    pass


@dataclass(eq=False)
class ScatteringMatrix:
    """``values[i, j]``: receiver ``i``, transmitter ``j``.

    ``mask[i, j]`` is False for entries that were not measured; those values
    are never read by any operation in this package.
    """

    values: np.ndarray
    mask: np.ndarray | None = None
    provenance: str = "simulated"
    frequency: float = float("nan")
    port_tags: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=complex)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ScatteringError(f"S must be square, got shape {self.values.shape}")
        n = self.values.shape[0]
        self.mask = np.ones((n, n), dtype=bool) if self.mask is None else \
            np.array(self.mask, dtype=bool)
        if self.mask.shape != (n, n):
            raise ScatteringError("mask shape does not match S")
        self.values[~self.mask] = 0.0
        if not self.port_tags:
            self.port_tags = list(range(1, n + 1))
        if len(self.port_tags) != n:
            raise ScatteringError(f"{len(self.port_tags)} port tags for a {n}x{n} matrix")
        if self.provenance not in PROVENANCES:
            raise ScatteringError(f"unknown provenance {self.provenance!r}")

    @property
    def n_ports(self):
        return self.values.shape[0]

    def copy(self, **changes):
        kw = dict(values=self.values.copy(), mask=self.mask.copy(), provenance=self.provenance,
                  frequency=self.frequency, port_tags=list(self.port_tags))
        kw.update(changes)
        return ScatteringMatrix(**kw)


def _port_quadrature(mode: PortMode, mesh):
    f = mode.faces
    wq = f.weights[None, :] * f.areas[:, None]
    return f.points(mesh), wq


def compute_smatrix(fields, modes, mesh=None, dof_map=None, transmitters=None,
                    frequency=float("nan")) -> ScatteringMatrix:
    """Scattering matrix of the solved fields.

    Parameters
    ----------
    fields : (n_dofs, m) array or sequence of callables
        Column ``j`` is the field excited by ``transmitters[j]``, as a
        full-numbering edge DoF vector, or a callable ``E(x)`` on points
        ``(..., 3)`` (then `mesh` is required).
    modes : list of PortMode
        All receivers; modes built with a DoF map carry the projection vector
        used for DoF fields.
    transmitters : list of int, optional
        Receiver index of each field column; defaults to ``0..m-1``.
        Columns of untreated transmitters are masked out.
    """
    n = len(modes)
    if isinstance(fields, np.ndarray):
        fields = fields.reshape(fields.shape[0], -1)
        m = fields.shape[1]
    else:
        fields = list(fields)
        m = len(fields)
    tx = list(range(m)) if transmitters is None else list(transmitters)
    if len(tx) != m:
        raise ScatteringError(f"{m} field columns for {len(tx)} transmitters")
    if transmitters is None and m != n:
        raise ScatteringError(f"missing field columns: {m} fields for {n} ports")
    S = np.zeros((n, n), dtype=complex)
    mask = np.zeros((n, n), dtype=bool)
    for col, j in enumerate(tx):
        mask[:, j] = True
        for i, mode in enumerate(modes):
            if isinstance(fields, np.ndarray):
                if mode.projection is None:
                    raise ScatteringError(f"mode of port {mode.tag} has no edge projection")
                num = np.conj(fields[:, col]) @ mode.projection
            else:
                if mesh is None:
                    raise ScatteringError("callable fields need the mesh")
                x, wq = _port_quadrature(mode, mesh)
                e = np.asarray(fields[col](x))
                num = np.sum(wq * np.einsum("fqx,fqx->fq", np.conj(e), mode.evaluate(x)))
            S[i, j] = num / mode.norm2
    return ScatteringMatrix(S, mask, "simulated", frequency, [md.tag for md in modes])


def opposite_index(j, antennas_per_ring):
    """Index of the receiver facing transmitter `j` in its own ring."""
    ring, k = divmod(int(j), antennas_per_ring)
    return ring * antennas_per_ring + (k + antennas_per_ring // 2) % antennas_per_ring


def normalize_row(S, j, opposite):
    """Divide the coefficients of transmitter `j` by the one at receiver `opposite`.

    `S` is a ScatteringMatrix (the transmitter's column is normalized in a
    copy) or a 1-D array of coefficients. The opposite entry becomes exactly 1.
    """
    if isinstance(S, ScatteringMatrix):
        if not S.mask[opposite, j]:
            raise ScatteringError(f"opposite entry ({opposite}, {j}) is not measured")
        out = S.copy()
        out.values[:, j] = normalize_row(S.values[:, j], None, opposite)
        out.values[~out.mask[:, j], j] = 0.0
        return out
    row = np.array(S, dtype=complex)
    ref = row[opposite]
    if ref == 0:
        raise ScatteringError(f"opposite coefficient at receiver {opposite} is zero")
    row = row / ref
    row[opposite] = 1.0
    return row


def magnitude_db(s):
    """``20 log10 |s|``; zero magnitude gives -inf with a warning."""
    mag = np.abs(np.asarray(s))
    if np.any(mag == 0):
        warnings.warn("zero S-parameter magnitude: returning -inf dB", RuntimeWarning,
                      stacklevel=2)
    with np.errstate(divide="ignore"):
        out = 20.0 * np.log10(mag)
    return float(out) if out.ndim == 0 else out


def write_smatrix_csv(S: ScatteringMatrix, path):
    """One ``tx,rx,re,im`` line per measured entry, floats with 17 digits."""
    with open(path, "w", newline="") as fh:
        fh.write("tx,rx,re,im\n")
        n = S.n_ports
        for j in range(n):
            for i in range(n):
                if S.mask[i, j]:
                    v = S.values[i, j]
                    fh.write(f"{j},{i},{v.real:.17g},{v.imag:.17g}\n")


def read_smatrix_csv(path, n_ports=None, provenance="measured", frequency=float("nan"),
                     port_tags=None) -> ScatteringMatrix:
    """Inverse of :func:`write_smatrix_csv`; absent lines become masked entries."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tx", "rx", "re", "im"]:
            raise ScatteringError(f"{path}: expected header tx,rx,re,im, got {header}")
        for ln, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                rows.append((int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3])))
            except (ValueError, IndexError) as exc:
                raise ScatteringError(f"{path}:{ln}: malformed line {rec}") from exc
    if n_ports is None:
        n_ports = 1 + max((max(t, r) for t, r, _, _ in rows), default=-1)
    S = np.zeros((n_ports, n_ports), dtype=complex)
    mask = np.zeros((n_ports, n_ports), dtype=bool)
    for t, r, re, im in rows:
        if not (0 <= t < n_ports and 0 <= r < n_ports):
            raise ScatteringError(f"{path}: entry ({t}, {r}) outside a {n_ports}-port matrix")
        S[r, t] = complex(re, im)
        mask[r, t] = True
    return ScatteringMatrix(S, mask, provenance, frequency, list(port_tags or []))
