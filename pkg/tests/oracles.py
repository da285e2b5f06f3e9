"""Independent reference implementations used as test oracles.

None of these import the code under test beyond plain data types; they are
deliberately naive (loops, fractions, textbook formulas).
"""

import math
from collections import deque
from fractions import Fraction

import numpy as np


# --- metrics -----------------------------------------------------------------

def threshold(d0):
    return 2 if d0 <= 20 else Fraction(d0, 10)


def success(d0, df):
    return df <= max(Fraction(2), Fraction(d0) / 10)


def spl(rows):
    """rows: (d0, df, p, l) integer tuples; exact rational SPL."""
    total = Fraction(0)
    for d0, df, p, l in rows:
        if success(d0, df):
            total += Fraction(l, max(p, l))
    return total / len(rows)


def median_norm(rows):
    vals = sorted(Fraction(df, d0) for d0, df, _, _ in rows)
    n = len(vals)
    if n % 2:
        return vals[n // 2]
    return (vals[n // 2 - 1] + vals[n // 2]) / 2


# --- GRU ---------------------------------------------------------------------

def gru_reference(h, x, wx, wh, bx, bh):
    """Textbook GRU with gate blocks (update, reset, candidate)."""
    H = h.shape[-1]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    ax = x @ wx + bx
    ah = h @ wh + bh
    u = sig(ax[..., :H] + ah[..., :H])
    r = sig(ax[..., H:2 * H] + ah[..., H:2 * H])
    n = np.tanh(ax[..., 2 * H:] + r * ah[..., 2 * H:])
    return (1 - u) * h + u * n


def conv1d_reference(x, w, b, stride):
    """Direct-loop 1D valid convolution, x [L, C], w [K, C, O]."""
    K, C, O = w.shape
    L = x.shape[0]
    n_out = (L - K) // stride + 1
    out = np.zeros((n_out, O))
    for t in range(n_out):
        for o in range(O):
            acc = b[o]
            for k in range(K):
                for c in range(C):
                    acc += x[t * stride + k, c] * w[k, c, o]
            out[t, o] = acc
    return out


# --- lattice search ----------------------------------------------------------

def lattice_bfs_from(edges, occ, start, ldx, ldy):
    """Forward BFS over lattice states from ``start``: dict state -> steps."""
    W, H = occ.shape
    dist = {start: 0}
    q = deque([start])
    while q:
        s = q.popleft()
        i, j, k = s
        nxt = [(i, j, (k + 1) % 12), (i, j, (k - 1) % 12)]
        if edges[i, j, k]:
            nxt.append((i + ldx[k], j + ldy[k], k))
        for t in nxt:
            if t not in dist:
                dist[t] = dist[s] + 1
                q.append(t)
    return dist


def steps_to_block(dist, goal, radius=1):
    """Fewest steps to any state whose cell is within ``radius`` of ``goal``."""
    gi, gj = goal
    best = math.inf
    for (i, j, _), d in dist.items():
        if abs(i - gi) <= radius and abs(j - gj) <= radius:
            best = min(best, d)
    return best


# --- geometry ----------------------------------------------------------------

def ray_to_vertical_wall(x0, wall_x):
    """Distance along +x from x0 to the face of a wall occupying x >= wall_x."""
    return wall_x - x0


def binomial_ci_width(p, n, z=1.96):
    return 2 * z * math.sqrt(p * (1 - p) / n)
