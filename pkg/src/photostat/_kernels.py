"""Compiled inner loops for the EM solver.

Summation order is fixed (row by row, column by column), so results do not
depend on threading or BLAS configuration.
"""

import numba
import numpy as np

BINOMIAL = 0
LINPOS = 1

RUNNING = 0
CONVERGED = 1
DEGENERATE = 2

PROB_FLOOR = 1e-300
FLUSH_LEVEL = np.finfo(np.float64).tiny


@numba.njit(cache=True)
def probabilities(x, A, C, f, p, q):
    """Fill ``p`` (no-click) and ``q`` (click) and return the total error."""
    K, M = A.shape
    eps = 0.0
    for v in range(K):
        sp = 0.0
        sq = 0.0
        for m in range(M):
            sp += A[v, m] * x[m]
            sq += C[v, m] * x[m]
        p[v] = sp
        q[v] = sq
        eps += abs(f[v] - sp)
    return eps


@numba.njit(cache=True)
def degenerate(f, p, q, rule):
    for v in range(f.shape[0]):
        if f[v] > 0.0 and p[v] <= 0.0:
            return True
        if rule == BINOMIAL and f[v] < 1.0 and q[v] <= 0.0:
            return True
    return False


@numba.njit(cache=True)
def iterate(x, A, C, f, wf, wg, col, rule, n_steps, tol):
    """Advance ``x`` in place by up to ``n_steps`` updates.

    Stops early, before updating, when the total error is ``<= tol``.
    Returns ``(steps_done, status)``.
    """
    K, M = A.shape
    p = np.empty(K)
    q = np.empty(K)
    r = np.empty(K)
    for it in range(n_steps):
        eps = probabilities(x, A, C, f, p, q)
        if eps <= tol:
            return it, CONVERGED
        if degenerate(f, p, q, rule):
            return it, DEGENERATE
        base = 0.0
        if rule == BINOMIAL:
            for v in range(K):
                a = wf[v] / max(p[v], PROB_FLOOR)
                b = wg[v] / max(q[v], PROB_FLOOR)
                base += b
                r[v] = a - b
        else:
            for v in range(K):
                r[v] = f[v] / max(p[v], PROB_FLOOR)
        total = 0.0
        for m in range(M):
            if x[m] == 0.0:
                continue
            s = 0.0
            for v in range(K):
                s += A[v, m] * r[v]
            if rule == BINOMIAL:
                s += base
            elif col[m] > 0.0:
                s /= col[m]
            else:
                # No row ever sees this photon number silently: keep its weight.
                s = 1.0
            xm = x[m] * s
            if xm < FLUSH_LEVEL:
                xm = 0.0
            x[m] = xm
            total += xm
        for m in range(M):
            x[m] /= total
    return n_steps, RUNNING
