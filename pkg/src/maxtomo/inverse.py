"""Misfit functional, adjoint-state gradient, L-BFGS and per-ring truncation.

The unknowns are the real and imaginary parts of the nodal relative
permittivity on the active nodes, ``x = [Re eps_a, Im eps_a]``. The cost is

    J = 1/2 sum_ij w_ij |S_ij - S^mes_ij|^2 + alpha/2 int |grad kappa|^2

with ``w_ij = 1 / |S^empty_ij|^2`` (noise-normalized) or 1, and
``kappa = k0^2 eps``. One evaluation of ``J`` and its gradient costs one
assembly, one preconditioner factorization, one block of state solves and
one block of adjoint solves with the same operator.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import MaterialField, assemble_volume_source, p1_stiffness, tet_geometry
from .forward import ForwardModel, ForwardResult
from .mesh import ABSORBING, Mesh, MeshError, mesh_from_tets, tet_centroids
from .scattering import ScatteringMatrix

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


class StaleStateError(RuntimeError):
    """Fields and adjoints do not belong to the current iterate."""


@dataclass(frozen=True)
class InverseConfig:
    """Settings of the reconstruction.

    ``rel_tol`` stops when ``J <= rel_tol * J0``; with ``absolute`` the test
    is ``J <= rel_tol``. ``active`` is a boolean node mask of the optimized
    permittivity values (all non-ceramic nodes by default). ``transmitters``
    restricts the excited ports (indices into the sorted port tags).
    """

    alpha: float = 1e-6
    normalize: bool = True
    memory: int = 10
    max_iter: int = 30
    rel_tol: float = 1e-2
    absolute: bool = False
    active: np.ndarray | None = None
    transmitters: tuple | None = None
    initial_step: float = 1.0

    def check(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.memory < 1 or self.max_iter < 0:
            raise ValueError("memory must be >= 1 and max_iter >= 0")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")


@dataclass(eq=False)
class InverseState:
    """Forward solution attached to one iterate."""

    eps: np.ndarray
    cost: float
    misfit: float
    regularization: float
    forward: ForwardResult
    residuals: np.ndarray  # r_ij = w_ij (S_ij - S^mes_ij), zero where unused
    version: int
    gradient: np.ndarray | None = None
    adjoints: np.ndarray | None = None


def cost_weights(use, empty: ScatteringMatrix | None, normalize=True):
    """``w_ij = 1/|S^empty_ij|^2`` (or 1) on the used entries, 0 elsewhere."""
    use = np.asarray(use, dtype=bool)
    if not normalize:
        return use.astype(float)
    if empty is None:
        raise ValueError("noise-normalized cost needs the empty-chamber reference")
    if np.any(~empty.mask[use]):
        raise ValueError("empty reference lacks entries used by the cost")
    mag = np.abs(empty.values)
    if np.any(mag[use] == 0):
        raise ValueError("empty reference has zero entries used by the cost")
    return np.where(use, 1.0 / np.where(mag > 0, mag, 1.0) ** 2, 0.0)


def misfit(S, measured, weights):
    """``(1/2 sum w |S - S^mes|^2, r)`` with residuals ``r = w (S - S^mes)``."""
    d = np.where(weights > 0, np.asarray(S) - np.asarray(measured), 0.0)
    return 0.5 * float(np.sum(weights * np.abs(d) ** 2)), weights * d


def default_active(mesh: Mesh):
    """Nodes touched by at least one non-ceramic tet."""
    act = np.zeros(mesh.n_nodes, dtype=bool)
    act[mesh.tets[mesh.regions != 1].ravel()] = True
    return act


class InverseProblem:
    """Cost, adjoint and gradient for measured data on a fixed mesh.

    Parameters
    ----------
    model : ForwardModel
    measured, empty : ScatteringMatrix
        Receivers are the model ports; the transmitters used are those of the
        model that are measured in at least one entry. `empty` may be None
        when ``config.normalize`` is False.
    background : MaterialField
        Values of the inactive nodes (and the starting point).
    """

    def __init__(self, model: ForwardModel, measured: ScatteringMatrix,
                 empty: ScatteringMatrix | None, background: MaterialField,
                 config: InverseConfig | None = None):
        self.model = model
        self.config = config or InverseConfig()
        self.config.check()
        mesh = model.mesh
        n = model.n_ports
        if measured.n_ports != n:
            raise ValueError(f"measured data has {measured.n_ports} ports, mesh has {n}")
        self.measured = measured
        self.empty = empty
        txmask = np.zeros(n, dtype=bool)
        txmask[model.transmitters] = True
        if self.config.normalize and empty is not None and empty.n_ports != n:
            raise ValueError("empty reference and measured data differ in size")
        self.weights = cost_weights(measured.mask & txmask[None, :], empty,
                                    self.config.normalize)
        self.background = np.array(background.eps, dtype=complex)
        active = default_active(mesh) if self.config.active is None \
            else np.asarray(self.config.active, dtype=bool)
        if active.shape != (mesh.n_nodes,):
            raise ValueError("active mask must have one entry per node")
        if np.any(active & ~default_active(mesh)):
            raise ValueError("active mask contains ceramic-only nodes")
        self.active = active
        self.active_ids = np.flatnonzero(active)
        # regularization over tets with all vertices active
        reg_tets = np.flatnonzero(active[mesh.tets].all(axis=1) & (mesh.regions != 1))
        self.stiffness = p1_stiffness(mesh, reg_tets)
        self._free_tets = np.flatnonzero(mesh.regions != 1)
        self._state: InverseState | None = None

    # -- parametrization ------------------------------------------------------

    @property
    def n_unknowns(self):
        return 2 * len(self.active_ids)

    def to_x(self, eps):
        e = np.asarray(eps)[self.active_ids]
        return np.concatenate([e.real, e.imag])

    def to_eps(self, x):
        x = np.asarray(x, dtype=float)
        k = len(self.active_ids)
        eps = self.background.copy()
        eps[self.active_ids] = x[:k] + 1j * x[k:]
        return eps

    # -- cost -------------------------------------------------------------------

    def regularization(self, eps):
        if self.config.alpha == 0:
            return 0.0
        c = self.model.params.k0sq
        u, v = eps.real, eps.imag
        q = u @ (self.stiffness @ u) + v @ (self.stiffness @ v)
        return 0.5 * self.config.alpha * c * c * float(q)

    def misfit_from(self, S):
        return misfit(S.values, self.measured.values, self.weights)

    def evaluate_cost(self, eps) -> InverseState:
        """Forward solve for all transmitters and the cost at `eps` (nodal array)."""
        eps = np.array(eps, dtype=complex)
        fwd = self.model.forward(MaterialField(eps))
        mis, r = self.misfit_from(fwd.smatrix)
        reg = self.regularization(eps)
        st = InverseState(eps, mis + reg, mis, reg, fwd, r, fwd.operator.version)
        self._state = st
        if np.any(eps[self.active_ids].imag > 0):
            warnings.warn("iterate has Im(eps_r) > 0 (active medium)", RuntimeWarning,
                          stacklevel=2)
        return st

    # -- adjoint and gradient ---------------------------------------------------

    def _check_current(self, state):
        if state is not self._state or state.version != self.model._version:
            raise StaleStateError("state does not match the most recent forward evaluation")

    def adjoint_rhs(self, state):
        """Adjoint port data ``h_j = sum_i r_ij conj(q_i) / N_i`` (reduced numbering)."""
        sysm = state.forward.operator.system
        tx = self.model.transmitters
        H = np.zeros((sysm.n, len(tx)), dtype=complex)
        for i, mode in enumerate(self.model.modes):
            q = np.conj(mode.projection[sysm.free]) / mode.norm2
            r = state.residuals[i, tx]
            if np.any(r):
                H += np.outer(q, r)
        return H

    def solve_adjoint(self, state) -> np.ndarray:
        """Adjoint fields ``F_j`` (full numbering) with the state operator."""
        self._check_current(state)
        op = state.forward.operator
        H = self.adjoint_rhs(state)
        X, _ = self.model.solve(op, H, labels=[self.model.ports[j] for j in
                                               self.model.transmitters])
        state.adjoints = op.system.expand(X)
        return state.adjoints

    def nodal_sensitivity(self, E, F, tets=None):
        """``G_n = sum_j int phi_n E_j . F_j`` for every node (complex)."""
        mesh = self.model.mesh
        dm = self.model.dof_map
        geo = tet_geometry(mesh, dm)
        tets = self._free_tets if tets is None else tets
        G = np.zeros(mesh.n_nodes, dtype=complex)
        for s in range(0, len(tets), 8192):
            t = tets[s:s + 8192]
            ue = E[dm.tet_edges[t]]  # (T, 6, m)
            fe = F[dm.tet_edges[t]]
            loc = np.einsum("tmab,taj,tbj->tm", geo.mass3[t], ue, fe)
            nodes = mesh.tets[t].ravel()
            G += np.bincount(nodes, loc.real.ravel(), minlength=mesh.n_nodes)
            G += 1j * np.bincount(nodes, loc.imag.ravel(), minlength=mesh.n_nodes)
        return G

    def compute_gradient(self, state) -> np.ndarray:
        """Gradient of J with respect to ``x = [Re eps_a, Im eps_a]``."""
        self._check_current(state)
        if state.adjoints is None:
            self.solve_adjoint(state)
        c = self.model.params.k0sq
        G = c * self.nodal_sensitivity(state.forward.fields, state.adjoints)
        gre, gim = G.real.copy(), -G.imag
        if self.config.alpha > 0:
            a = self.config.alpha * c * c
            gre += a * (self.stiffness @ state.eps.real)
            gim += a * (self.stiffness @ state.eps.imag)
        g = np.concatenate([gre[self.active_ids], gim[self.active_ids]])
        state.gradient = g
        return g

    def nodal_gradient(self, g):
        """Split a gradient vector into complex nodal form ``dJ/dRe + i dJ/dIm``; zero off-mask."""
        k = len(self.active_ids)
        out = np.zeros(self.model.mesh.n_nodes, dtype=complex)
        out[self.active_ids] = g[:k] + 1j * g[k:]
        return out

    def solve_linearized(self, state, dkappa) -> np.ndarray:
        """Field perturbations ``dE_j`` (full numbering) for a nodal kappa perturbation.

        Solves the forward operator with the volume source ``dkappa E_j``.
        """
        self._check_current(state)
        mesh = self.model.mesh
        dm = self.model.dof_map
        op = state.forward.operator
        dk = np.asarray(dkappa, dtype=complex)
        if not np.any(dk):
            return np.zeros_like(state.forward.fields)
        from .quadrature import tetrahedron_rule

        geo = tet_geometry(mesh, dm)
        bary, _ = tetrahedron_rule(4)
        dk_t = dk[mesh.tets]
        dk_t[mesh.regions == 1] = 0.0
        dkq = np.einsum("tm,qm->tq", dk_t, bary)
        cols = []
        for j in range(state.forward.fields.shape[1]):
            e = state.forward.fields[:, j]
            src = np.empty((mesh.n_tets, len(bary), 3), dtype=complex)
            for s in range(0, mesh.n_tets, 8192):
                t = np.arange(s, min(mesh.n_tets, s + 8192))
                w = geo.basis(t, bary)
                src[t] = dkq[t, :, None] * np.einsum("ta,tqax->tqx", e[dm.tet_edges[t]], w)
            cols.append(assemble_volume_source(mesh, dm, src)[op.system.free])
        X, _ = self.model.solve(op, np.column_stack(cols))
        return op.system.expand(X)

    def linearized_derivative(self, state, dkappa):
        """``DJ`` from the S-parameter perturbation of the linearized problem.

        ``dkappa`` perturbs kappa only (the Tikhonov part is not included).
        """
        dE = self.solve_linearized(state, dkappa)
        tx = self.model.transmitters
        dS = np.zeros_like(self.measured.values)
        for i, mode in enumerate(self.model.modes):
            dS[i, tx] = (np.conj(dE).T @ mode.projection) / mode.norm2
        return float(np.real(np.sum(np.conj(state.residuals) * dS)))

    # -- scalar interface for the optimizer ------------------------------------

    def state_at(self, x):
        eps = self.to_eps(x)
        st = self._state
        if st is None or not np.array_equal(st.eps, eps) or st.version != self.model._version:
            st = self.evaluate_cost(eps)
        return st

    def fun(self, x):
        return self.state_at(x).cost

    def jac(self, x):
        st = self.state_at(x)
        return st.gradient if st.gradient is not None else self.compute_gradient(st)


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    nit: int
    status: str  # "converged" | "max-iter" | "line-search-failure" | "stationary"
    history: list = field(default_factory=list)

    @property
    def success(self):
        return self.status in ("converged", "stationary")


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun, jac, x0, memory=10, max_iter=100, rel_tol=1e-2, absolute=False,
                   gtol=0.0, c1=1e-4, max_backtracks=40, initial_step=1.0, callback=None):
    """Limited-memory BFGS with backtracking Armijo line search (halving).

    Stops when ``f <= rel_tol * f0`` (``f <= rel_tol`` with `absolute`),
    when ``||g||_inf <= gtol``, after `max_iter` iterations, or when the line
    search fails; the last accepted iterate is always returned. The first
    step is scaled so that its largest component is `initial_step`.
    ``history`` holds one ``(iter, cost, grad_norm, step)`` record per
    accepted iterate, starting with iteration 0.
    """
    x = np.array(x0, dtype=float)
    f = float(fun(x))
    g = np.asarray(jac(x), dtype=float)
    f0 = f
    target = rel_tol if absolute else rel_tol * f0
    hist = [dict(iter=0, cost=f, grad_norm=float(np.linalg.norm(g)), step=0.0)]
    if callback:
        callback(hist[-1])
    pairs = []
    status = "max-iter"
    it = 0
    while True:
        if f <= target:
            status = "converged"
            break
        if np.max(np.abs(g), initial=0.0) <= gtol:
            status = "stationary"
            break
        if it >= max_iter:
            break
        d = _two_loop(g, pairs)
        if not pairs:
            d *= initial_step / np.max(np.abs(g))
        slope = g @ d
        if slope >= 0:  # not a descent direction: reset memory
            pairs.clear()
            d = -g * initial_step / np.max(np.abs(g))
            slope = g @ d
        t = 1.0
        for _ in range(max_backtracks):
            xn = x + t * d
            fn = float(fun(xn))
            if math.isfinite(fn) and fn <= f + c1 * t * slope:
                break
            t *= 0.5
        else:
            status = "line-search-failure"
            break
        gn = np.asarray(jac(xn), dtype=float)
        s, y = xn - x, gn - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
            if len(pairs) > memory:
                pairs.pop(0)
        x, f, g = xn, fn, gn
        it += 1
        hist.append(dict(iter=it, cost=f, grad_norm=float(np.linalg.norm(g)),
                         step=float(t * np.linalg.norm(d))))
        if callback:
            callback(hist[-1])
    return OptimizeResult(x, f, g, it, status, hist)


def reconstruct(problem: InverseProblem, initial: MaterialField | None = None, callback=None):
    """Run L-BFGS from `initial` (the background by default).

    Returns ``(MaterialField, OptimizeResult)``; inactive nodes keep their
    background values bit for bit.
    """
    cfg = problem.config
    x0 = problem.to_x(problem.background if initial is None else initial.eps)
    res = lbfgs_minimize(problem.fun, problem.jac, x0, memory=cfg.memory,
                         max_iter=cfg.max_iter, rel_tol=cfg.rel_tol, absolute=cfg.absolute,
                         initial_step=cfg.initial_step, callback=callback)
    return MaterialField(problem.to_eps(res.x)), res


def write_history_csv(history, path):
    with open(path, "w") as fh:
        fh.write("iter,cost,grad_norm,step\n")
        for h in history:
            fh.write(f"{h['iter']},{h['cost']:.17g},{h['grad_norm']:.17g},{h['step']:.17g}\n")


# ---------------------------------------------------------------------------
# layer-by-layer truncation


@dataclass(eq=False)
class TruncatedMesh:
    mesh: Mesh
    node_map: np.ndarray  # sub-mesh node -> original node
    tet_map: np.ndarray
    rings: list  # original ring indices present, top first
    transmitters: list  # indices into mesh.port_tags of the selected ring's ports


def truncate_for_ring(mesh: Mesh, ring: int) -> TruncatedMesh:
    """Slab of a chamber around `ring` with at most one ring above and below.

    The slab is cut at the mid-planes between rings; cut surfaces become
    absorbing (tag -1), all other boundary triangles keep their tags.
    """
    meta = mesh.meta
    if meta.get("kind") != "chamber":
        raise MeshError("ring truncation needs a chamber mesh with ring metadata")
    nr, apr = int(meta["n_rings"]), int(meta["antennas_per_ring"])
    if not 0 <= ring < nr:
        raise ValueError(f"ring {ring} outside 0..{nr - 1}")
    z = list(meta["ring_z"])
    rings = [r for r in (ring - 1, ring, ring + 1) if 0 <= r < nr]
    top = 0.5 * (z[rings[0] - 1] + z[rings[0]]) if rings[0] > 0 else math.inf
    bottom = 0.5 * (z[rings[-1]] + z[rings[-1] + 1]) if rings[-1] < nr - 1 else -math.inf
    zc = tet_centroids(mesh)[:, 2]
    keep = np.flatnonzero((zc < top) & (zc > bottom))
    used = np.unique(mesh.tets[keep])
    remap = -np.ones(mesh.n_nodes, dtype=np.int64)
    remap[used] = np.arange(len(used))
    n = mesh.n_nodes
    key = np.sort(mesh.tris, axis=1)
    key = (key[:, 0] * n + key[:, 1]) * n + key[:, 2]
    order = np.argsort(key)
    skey = key[order]

    def tagger(tris, c, nrm):
        t = np.sort(used[tris], axis=1)
        k = (t[:, 0] * n + t[:, 1]) * n + t[:, 2]
        pos = np.clip(np.searchsorted(skey, k), 0, len(skey) - 1)
        hit = skey[pos] == k
        return np.where(hit, mesh.tri_tags[order[pos]], ABSORBING)

    sub_meta = dict(meta)
    sub_meta.update(n_rings=len(rings), ring_z=[z[r] for r in rings], ring_offset=rings[0],
                    truncated_from=ring)
    sub = mesh_from_tets(mesh.nodes[used], remap[mesh.tets[keep]], mesh.regions[keep],
                         tag_boundary=tagger, meta=sub_meta)
    tags = sub.port_tags
    own = [tags.index(ring * apr + k + 1) for k in range(apr) if ring * apr + k + 1 in tags]
    return TruncatedMesh(sub, used, keep, rings, own)


def restrict_smatrix(S: ScatteringMatrix, tags) -> ScatteringMatrix:
    """Sub-matrix of `S` on the ports with the given tags."""
    idx = [list(S.port_tags).index(t) for t in tags]
    return ScatteringMatrix(S.values[np.ix_(idx, idx)], S.mask[np.ix_(idx, idx)],
                            S.provenance, S.frequency, list(tags))


def reconstruct_by_rings(mesh: Mesh, params, solver, measured, empty, background, config,
                         rings=None, callback=None):
    """Layer-by-layer reconstruction; each ring updates the nodes of its own slab.

    Rings are processed in order, each starting from the current estimate.
    Returns ``(MaterialField, [OptimizeResult per ring])``.
    """
    eps = np.array(background.eps, dtype=complex)
    rings = range(int(mesh.meta.get("n_rings", 1))) if rings is None else rings
    results = []
    for r in rings:
        tm = truncate_for_ring(mesh, r)
        model = ForwardModel(tm.mesh, params, solver, transmitters=tm.transmitters)
        tags = model.ports
        act = None
        if config.active is not None:
            act = np.asarray(config.active, dtype=bool)[tm.node_map]
        cfg = replace(config, active=act)
        prob = InverseProblem(model, restrict_smatrix(measured, tags),
                              None if empty is None else restrict_smatrix(empty, tags),
                              MaterialField(eps[tm.node_map]), cfg)
        field_r, res = reconstruct(prob, callback=callback)
        eps[tm.node_map] = field_r.eps
        results.append(res)
        log.info("ring %d: %d iterations, J %.3e -> %.3e (%s)", r, res.nit,
                 res.history[0]["cost"], res.fun, res.status)
    return MaterialField(eps), results
