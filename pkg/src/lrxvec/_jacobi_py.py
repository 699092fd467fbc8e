"""Pure numpy one-sided Jacobi kernel (fallback for the compiled one).

Uses a round-robin tournament ordering so each round rotates n/2 disjoint
pairs at once with vectorized numpy operations.
"""

import numpy as np


def _tournament(n):
    # circle method; index n marks a bye when n is odd
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        half = size // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < n) & (q < n)
        lo, hi = np.minimum(p, q)[keep], np.maximum(p, q)[keep]
        rounds.append((lo, hi))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_sweeps(g, vt, tol, max_sweeps):
    """Same contract as the compiled kernel: in place, returns sweeps or -1."""
    n = g.shape[0]
    if n < 2:
        return 1
    rounds = _tournament(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            gp, gq = g[p], g[q]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            active = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            root = np.sqrt(1.0 + zeta * zeta)
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + root)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (c * t)[:, None]
            c = c[:, None]
            for a in (g, vt):
                ap, aq = a[p], a[q]
                a[p] = c * ap - s * aq
                a[q] = s * ap + c * aq
        if not rotated:
            return sweep + 1
    return -1
