"""Direct-problem driver: assembly, Schwarz preconditioner and block GMRES.

A :class:`ForwardModel` holds everything that depends only on the mesh
(edge numbering, port modes, subdomain decomposition). Each permittivity
map is turned into one :class:`Operator` (one assembly, one factorization),
which then serves any number of right-hand-side blocks: the forward solves
and the adjoint solves of the inverse problem.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ddm import assemble_local_matrices
from .fem import (ComplexSparseSystem, MaterialField, PhysicsParams, assemble_system,
                  build_edge_dof_map, te10_mode)
from .krylov import SolveStats, gmres
from .mesh import Mesh, build_partition_of_unity, grow_overlap, partition
from .scattering import ScatteringMatrix, compute_smatrix


class SolverError(RuntimeError):
    """GMRES did not reach the tolerance for some right-hand sides."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


@dataclass(frozen=True)
class SolverConfig:
    n_subdomains: int = 1
    delta: int = 1
    variant: str = "ORAS"
    tol: float = 1e-8
    max_iter: int = 500
    restart: int | None = None
    threads: int = 1
    partition: str = "coordinate-bisection"
    solver_groups: int = 1

    def check(self):
        if not 0 < self.tol < 1:
            raise ValueError(f"tol must lie in (0, 1), got {self.tol}")
        if self.threads < 1 or self.solver_groups < 1 or self.n_subdomains < 1:
            raise ValueError("threads, solver_groups and n_subdomains must be >= 1")
        if self.delta < 1:
            raise ValueError("overlap delta must be >= 1")
        if self.variant not in ("ORAS", "RAS"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(eq=False)
class Operator:
    """Assembled system and factorized preconditioner for one material."""

    system: ComplexSparseSystem
    precond: object
    setup_time: float
    version: int


@dataclass(eq=False)
class ForwardResult:
    operator: Operator
    fields: np.ndarray  # (n_full, m) edge DoFs, one column per transmitter
    smatrix: ScatteringMatrix
    stats: list = field(default_factory=list)
    solve_time: float = 0.0


class ForwardModel:
    """Direct problem on a fixed mesh.

    Parameters
    ----------
    transmitters : list of int, optional
        Indices (into the sorted port tags) of the excited ports; all by default.
    """

    def __init__(self, mesh: Mesh, params: PhysicsParams, solver: SolverConfig | None = None,
                 transmitters=None):
        self.mesh = mesh
        self.params = params
        self.solver = solver or SolverConfig()
        self.solver.check()
        self.dof_map = build_edge_dof_map(mesh)
        self.ports = mesh.port_tags
        if not self.ports:
            raise ValueError("mesh has no ports")
        self.modes = [te10_mode(mesh, t, params, dof_map=self.dof_map)[0] for t in self.ports]
        self.transmitters = list(range(len(self.ports))) if transmitters is None \
            else [int(j) for j in transmitters]
        bad = [j for j in self.transmitters if not 0 <= j < len(self.ports)]
        if bad:
            raise ValueError(f"transmitter indices {bad} outside 0..{len(self.ports) - 1}")
        s = self.solver
        assignment = partition(mesh, s.n_subdomains, s.partition)
        self.decomp = build_partition_of_unity(grow_overlap(mesh, assignment, s.delta),
                                               mesh, self.dof_map)
        self._version = 0

    @property
    def n_ports(self):
        return len(self.ports)

    def operator(self, material: MaterialField) -> Operator:
        """One assembly and one preconditioner factorization."""
        t0 = time.perf_counter()
        system = assemble_system(self.mesh, self.dof_map, material, self.params,
                                 ports=self.ports, modes=self.modes)
        pre = assemble_local_matrices(self.mesh, self.decomp, self.dof_map, material, self.params,
                                      system, variant=self.solver.variant,
                                      threads=self.solver.threads)
        self._version += 1
        return Operator(system, pre, time.perf_counter() - t0, self._version)

    def solve(self, op: Operator, B, labels=None, check=True):
        """Solve ``A X = B`` (reduced numbering) by ORAS/RAS-preconditioned GMRES.

        Columns are split into ``solver_groups`` contiguous groups solved
        concurrently, each as one pseudo-block. Returns ``(X, [SolveStats])``.
        """
        s = self.solver
        B = np.asarray(B, dtype=complex).reshape(op.system.n, -1)
        groups = [g for g in np.array_split(np.arange(B.shape[1]), s.solver_groups) if g.size]

        def run(g):
            return gmres(op.system.A, B[:, g], op.precond, tol=s.tol, max_iter=s.max_iter,
                         restart=s.restart)

        if len(groups) > 1:
            with ThreadPoolExecutor(len(groups)) as pool:
                out = list(pool.map(run, groups))
        else:
            out = [run(g) for g in groups]
        X = np.zeros_like(B)
        stats = []
        for g, (Xg, st) in zip(groups, out):
            X[:, g] = Xg
            stats.append(st)
        if check:
            labels = list(range(B.shape[1])) if labels is None else list(labels)
            failed = [labels[c] for g, st in zip(groups, stats)
                      for c, ok in zip(g, st.converged) if not ok]
            if failed:
                raise SolverError(f"GMRES did not converge for transmitters {failed}", failed)
        return X, stats

    def forward(self, material: MaterialField, op: Operator | None = None) -> ForwardResult:
        op = op or self.operator(material)
        tx = self.transmitters
        t0 = time.perf_counter()
        X, stats = self.solve(op, op.system.B[:, tx], labels=[self.ports[j] for j in tx])
        U = op.system.expand(X)
        S = compute_smatrix(U, self.modes, transmitters=tx, frequency=self.params.frequency)
        return ForwardResult(op, U, S, stats, time.perf_counter() - t0)


def merge_stats(stats) -> SolveStats:
    """Concatenate per-group statistics in column order."""
    stats = list(stats)
    return SolveStats(np.concatenate([s.iterations for s in stats]),
                      np.concatenate([s.residuals for s in stats]),
                      np.concatenate([s.converged for s in stats]),
                      max(s.wall_time for s in stats), sum(s.restarts for s in stats),
                      [e for s in stats for e in s.estimates])
