"""Right-preconditioned GMRES for blocks of right-hand sides.

Each column runs its own Arnoldi process; the columns advance in lockstep
so operator applications, Gram-Schmidt projections and norms are fused into
block operations (pseudo-block GMRES). No Krylov information is shared
between columns, so every column follows the single-RHS iteration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fem import COUNTERS


@dataclass
class SolveStats:
    """Per-column outcome of :func:`gmres`.

    ``residuals`` are recomputed explicitly as ``||b - A x|| / ||b||`` at
    exit. ``estimates[j]`` lists the Arnoldi residual estimates of column
    ``j`` in iteration order (a new cycle starts after each restart).
    """

    iterations: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    wall_time: float = 0.0
    restarts: int = 0
    estimates: list = field(default_factory=list)

    def as_records(self):
        return [dict(column=j, iterations=int(self.iterations[j]),
                     residual=float(self.residuals[j]), converged=bool(self.converged[j]))
                for j in range(len(self.iterations))]


def _as_block_op(op, n):
    if op is None:
        return lambda X: X
    if callable(op) and not hasattr(op, "shape"):
        return op
    if hasattr(op, "apply_block"):
        return op.apply_block
    return lambda X: op @ X


def _givens(a, b):
    # rotation (c, s) with [c s; -conj(s) c] [a; b] = [r; 0], b real >= 0
    absa = np.abs(a)
    r = np.hypot(absa, b)
    c = np.where(r > 0, absa / np.where(r > 0, r, 1), 1.0)
    phase = np.where(absa > 0, a / np.where(absa > 0, absa, 1), 1.0)
    s = np.where(r > 0, phase * b / np.where(r > 0, r, 1), 0.0)
    return c, s, phase * r


def _cycle(A, M, R0, beta, bnorm, tol, budget, estimates, cols):
    """One Arnoldi cycle on columns `R0`; returns (update, steps, est)."""
    n, k = R0.shape
    kmax = int(budget.max())
    cap = min(kmax + 1, 32)
    V = np.empty((cap, n, k), dtype=complex)
    V[0] = R0 / beta
    H = np.zeros((kmax + 1, kmax, k), dtype=complex)
    cs = np.zeros((kmax, k))
    sn = np.zeros((kmax, k), dtype=complex)
    g = np.zeros((kmax + 1, k), dtype=complex)
    g[0] = beta
    live = np.ones(k, dtype=bool)
    steps = np.zeros(k, dtype=np.int64)
    est = beta / bnorm
    for it in range(kmax):
        lc = np.flatnonzero(live)
        if lc.size == 0:
            break
        every = lc.size == k
        Vi = V[it] if every else V[it][:, lc]
        W = A(M(Vi))
        W = np.array(W, dtype=complex, copy=True)
        basis = V[:it + 1] if every else V[:it + 1][:, :, lc]
        h = np.einsum("jnk,nk->jk", basis.conj(), W)
        W -= np.einsum("jnk,jk->nk", basis, h)
        h2 = np.einsum("jnk,nk->jk", basis.conj(), W)
        W -= np.einsum("jnk,jk->nk", basis, h2)
        h += h2
        hn = np.linalg.norm(W, axis=0)
        col = np.vstack([h, hn[None, :]]).astype(complex)
        for i in range(it):
            c, s = cs[i, lc], sn[i, lc]
            top = c * col[i] + s * col[i + 1]
            col[i + 1] = -np.conj(s) * col[i] + c * col[i + 1]
            col[i] = top
        c, s, r = _givens(col[it], hn)
        col[it] = r
        col[it + 1] = 0.0
        cs[it, lc], sn[it, lc] = c, s
        H[:it + 2, it, lc] = col
        g[it + 1, lc] = -np.conj(s) * g[it, lc]
        g[it, lc] = c * g[it, lc]
        steps[lc] += 1
        res = np.abs(g[it + 1, lc]) / bnorm[lc]
        est[lc] = res
        for c_local, c_glob in enumerate(lc):
            estimates[cols[c_glob]].append(float(res[c_local]))
        breakdown = hn <= 1e-14 * np.maximum(np.abs(r), 1e-300)
        done = (res <= tol) | breakdown | (steps[lc] >= budget[lc])
        live[lc[done]] = False
        grow = lc[~done]
        if grow.size:
            if it + 1 >= V.shape[0]:
                V2 = np.empty((min(2 * V.shape[0], kmax + 1), n, k), dtype=complex)
                V2[:it + 1] = V[:it + 1]
                V = V2
            pos = np.flatnonzero(~done)
            V[it + 1][:, grow] = W[:, pos] / hn[pos]
    U = np.zeros((n, k), dtype=complex)
    for j in range(k):
        m = steps[j]
        if m == 0:
            continue
        y = np.linalg.solve(np.triu(H[:m, :m, j]), g[:m, j]) if m > 1 else g[:1, j] / H[0, 0, j]
        U[:, j] = np.einsum("jn,j->n", V[:m, :, j], y)
    return M(U), steps, est


def gmres(A, B, M=None, tol=1e-8, max_iter=500, restart=None, x0=None):
    """Solve ``A X = B`` column by column with right-preconditioned GMRES.

    Parameters
    ----------
    A, M : sparse matrix, object with ``apply_block``, or callable on ``(n, k)`` blocks
        Operator and right preconditioner (identity when `M` is None).
    B : (n,) or (n, m) array
    tol : float
        Target for the unpreconditioned relative residual of every column.
    max_iter : int
        Arnoldi steps allowed per column, over all cycles.
    restart : int, optional
        Cycle length; no restart by default.

    Returns
    -------
    X : array shaped like `B`
    stats : SolveStats
        Non-converged columns are flagged, not raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    single = np.ndim(B) == 1
    B = np.asarray(B, dtype=complex).reshape(len(B), -1)
    n, m = B.shape
    Aop = _as_block_op(A, n)
    Mop = _as_block_op(M, n)
    X = np.zeros((n, m), dtype=complex) if x0 is None else \
        np.asarray(x0, dtype=complex).reshape(n, m).copy()
    bnorm = np.linalg.norm(B, axis=0)
    its = np.zeros(m, dtype=np.int64)
    converged = bnorm == 0
    X[:, converged] = 0.0
    resumed = np.zeros(m, dtype=bool)
    estimates = [[] for _ in range(m)]
    active = ~converged
    restarts = 0
    COUNTERS["block_solve"] += 1
    cycle_len = max_iter if restart is None else restart
    while active.any():
        cols = np.flatnonzero(active)
        R = B[:, cols] - Aop(X[:, cols])
        beta = np.linalg.norm(R, axis=0)
        budget = np.minimum(cycle_len, max_iter - its[cols])
        ok = (beta / bnorm[cols] <= tol) | (budget <= 0)
        if ok.all():
            break
        run = cols[~ok]
        dX, steps, est = _cycle(Aop, Mop, R[:, ~ok], beta[~ok], bnorm[run], tol,
                                budget[~ok], estimates, run)
        X[:, run] += dX
        its[run] += steps
        true = np.linalg.norm(B[:, run] - Aop(X[:, run]), axis=0) / bnorm[run]
        for c, r_true, r_est in zip(run, true, est):
            if r_true <= tol:
                converged[c] = True
                active[c] = False
            elif its[c] >= max_iter:
                active[c] = False
            elif r_est <= tol:
                # estimate drifted from the true residual: resume once
                if resumed[c]:
                    active[c] = False
                else:
                    resumed[c] = True
                    restarts += 1
            else:
                restarts += 1
        active[cols[ok]] = False
    R = B - Aop(X)
    res = np.where(bnorm > 0, np.linalg.norm(R, axis=0) / np.where(bnorm > 0, bnorm, 1), 0.0)
    converged = res <= tol
    stats = SolveStats(its, res, converged, time.perf_counter() - t0, restarts, estimates)
    return (X[:, 0] if single else X), stats
