"""Compiled inner loops for ray casting, disk collision and lattice search.

Everything here works on plain arrays so it can be jitted; the public
wrappers live in :mod:`rpf.sim` and :mod:`rpf.envgen`.
"""

import math

import numba as nb
import numpy as np

# Forward displacement, in cells, for each of the 12 heading bins.
LATTICE_DX = np.array([int(round(2.0 * math.cos(math.radians(30 * k)))) for k in range(12)], dtype=np.int64)
LATTICE_DY = np.array([int(round(2.0 * math.sin(math.radians(30 * k)))) for k in range(12)], dtype=np.int64)

UNREACHED = -1


@nb.njit(cache=True)
def disk_hits(occ, x, y, r, cell):
    W, H = occ.shape
    i0 = int(math.floor((x - r) / cell))
    i1 = int(math.floor((x + r) / cell))
    j0 = int(math.floor((y - r) / cell))
    j1 = int(math.floor((y + r) / cell))
    r2 = r * r
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if i < 0 or j < 0 or i >= W or j >= H:
                return True
            if occ[i, j]:
                cx = min(max(x, i * cell), (i + 1) * cell)
                cy = min(max(y, j * cell), (j + 1) * cell)
                if (x - cx) ** 2 + (y - cy) ** 2 < r2:
                    return True
    return False


@nb.njit(cache=True)
def sweep_disk(occ, x, y, dx, dy, r, cell):
    """Largest t in [0, 1] such that the disk stays free on [0, t]; plus a blocked flag."""
    length = math.sqrt(dx * dx + dy * dy)
    n = max(1, int(math.ceil(length / 0.02)))
    lo = 0.0
    for k in range(1, n + 1):
        t = k / n
        if disk_hits(occ, x + t * dx, y + t * dy, r, cell):
            hi = t
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if disk_hits(occ, x + mid * dx, y + mid * dy, r, cell):
                    hi = mid
                else:
                    lo = mid
            return lo, True
        lo = t
    return 1.0, False


@nb.njit(cache=True)
def cast_rays(labels, x, y, angles, max_range, cell, depth, cls):
    """DDA traversal; writes normalized depth and class index (3 = nothing)."""
    W, H = labels.shape
    for a in range(angles.shape[0]):
        dx = math.cos(angles[a])
        dy = math.sin(angles[a])
        i = int(math.floor(x / cell))
        j = int(math.floor(y / cell))
        depth[a] = 1.0
        cls[a] = 3
        if i < 0 or j < 0 or i >= W or j >= H:
            continue
        if labels[i, j] >= 0:
            depth[a] = 0.0
            cls[a] = labels[i, j]
            continue
        if dx > 0:
            sx = 1
            tmx = ((i + 1) * cell - x) / dx
            tdx = cell / dx
        elif dx < 0:
            sx = -1
            tmx = (i * cell - x) / dx
            tdx = -cell / dx
        else:
            sx = 0
            tmx = np.inf
            tdx = np.inf
        if dy > 0:
            sy = 1
            tmy = ((j + 1) * cell - y) / dy
            tdy = cell / dy
        elif dy < 0:
            sy = -1
            tmy = (j * cell - y) / dy
            tdy = -cell / dy
        else:
            sy = 0
            tmy = np.inf
            tdy = np.inf
        while True:
            if tmx < tmy:
                t = tmx
                i += sx
                tmx += tdx
            else:
                t = tmy
                j += sy
                tmy += tdy
            if t >= max_range:
                break
            if i < 0 or j < 0 or i >= W or j >= H:
                break
            if labels[i, j] >= 0:
                depth[a] = t / max_range
                cls[a] = labels[i, j]
                break


@nb.njit(cache=True)
def cast_rays_batch(labels, xs, ys, angles, max_range, cell, depth, cls):
    for n in range(xs.shape[0]):
        cast_rays(labels, xs[n], ys[n], angles[n], max_range, cell, depth[n], cls[n])


@nb.njit(cache=True)
def lattice_edges(occ, clearance, cell, r, ldx, ldy, r_pressed):
    """edges[i, j, k] is True when a noiseless lattice Forward from (i, j) at bin k is free.

    The sweep uses a disk of radius ``r``, or ``r_pressed`` from cells whose
    center is within ``r`` of an obstacle (an agent pressed against a wall
    sits in such a cell and must still be able to leave it).
    ``clearance`` is the center-to-nearest-occupied-center distance; cells far
    enough from everything skip the sweep (the bound is exact, not heuristic).
    """
    W, H = occ.shape
    out = np.zeros((W, H, 12), dtype=np.bool_)
    reach = 2.0 * math.sqrt(2.0) * cell + r + 0.5 * math.sqrt(2.0) * cell
    for i in range(W):
        for j in range(H):
            if occ[i, j]:
                continue
            x = (i + 0.5) * cell
            y = (j + 0.5) * cell
            if clearance[i, j] > reach + 1e-9:
                for k in range(12):
                    ti = i + ldx[k]
                    tj = j + ldy[k]
                    out[i, j, k] = 0 <= ti < W and 0 <= tj < H
                continue
            rs = r_pressed if disk_hits(occ, x, y, r, cell) else r
            for k in range(12):
                ti = i + ldx[k]
                tj = j + ldy[k]
                if ti < 0 or tj < 0 or ti >= W or tj >= H or occ[ti, tj]:
                    continue
                # each point of the segment is within half its length of an endpoint
                half = 0.5 * cell * math.sqrt(ldx[k] * ldx[k] + ldy[k] * ldy[k])
                bound = half + r + 0.5 * math.sqrt(2.0) * cell + 1e-9
                if clearance[i, j] > bound and clearance[ti, tj] > bound:
                    out[i, j, k] = True
                    continue
                _, blocked = sweep_disk(occ, x, y, ldx[k] * cell, ldy[k] * cell, rs, cell)
                out[i, j, k] = not blocked
    return out


@nb.njit(cache=True)
def bfs_to_goal(edges, occ, gi, gj, radius, ldx, ldy):
    """Macro-action count from every lattice state into the goal block; -1 when unreachable.

    The goal block is every free cell whose index offset from (gi, gj) is at
    most ``radius`` in both axes.
    """
    W, H, K = edges.shape
    dist = np.full((W, H, K), -1, dtype=np.int32)
    qi = np.empty(W * H * K, dtype=np.int32)
    qj = np.empty(W * H * K, dtype=np.int32)
    qk = np.empty(W * H * K, dtype=np.int32)
    head = 0
    tail = 0
    for i in range(max(gi - radius, 0), min(gi + radius + 1, W)):
        for j in range(max(gj - radius, 0), min(gj + radius + 1, H)):
            if occ[i, j]:
                continue
            for k in range(K):
                dist[i, j, k] = 0
                qi[tail] = i
                qj[tail] = j
                qk[tail] = k
                tail += 1
    while head < tail:
        i = qi[head]
        j = qj[head]
        k = qk[head]
        head += 1
        d = dist[i, j, k] + 1
        # predecessors by rotation: turning left from k-1 or right from k+1 lands on k
        for pk in ((k + K - 1) % K, (k + 1) % K):
            if dist[i, j, pk] < 0:
                dist[i, j, pk] = d
                qi[tail] = i
                qj[tail] = j
                qk[tail] = pk
                tail += 1
        pi = i - ldx[k]
        pj = j - ldy[k]
        if 0 <= pi < W and 0 <= pj < H and edges[pi, pj, k] and dist[pi, pj, k] < 0:
            dist[pi, pj, k] = d
            qi[tail] = pi
            qj[tail] = pj
            qk[tail] = k
            tail += 1
    return dist


@nb.njit(cache=True)
def bfs_from_start(edges, allowed, si, sj, sk, ldx, ldy):
    """Forward BFS from one lattice state over cells where ``allowed`` is True."""
    W, H, K = edges.shape
    dist = np.full((W, H, K), -1, dtype=np.int32)
    qi = np.empty(W * H * K, dtype=np.int32)
    qj = np.empty(W * H * K, dtype=np.int32)
    qk = np.empty(W * H * K, dtype=np.int32)
    dist[si, sj, sk] = 0
    qi[0] = si
    qj[0] = sj
    qk[0] = sk
    head = 0
    tail = 1
    while head < tail:
        i = qi[head]
        j = qj[head]
        k = qk[head]
        head += 1
        d = dist[i, j, k] + 1
        for nk in ((k + 1) % K, (k + K - 1) % K):
            if dist[i, j, nk] < 0:
                dist[i, j, nk] = d
                qi[tail] = i
                qj[tail] = j
                qk[tail] = nk
                tail += 1
        if edges[i, j, k]:
            ni = i + ldx[k]
            nj = j + ldy[k]
            if allowed[ni, nj] and dist[ni, nj, k] < 0:
                dist[ni, nj, k] = d
                qi[tail] = ni
                qj[tail] = nj
                qk[tail] = k
                tail += 1
    return dist


@nb.njit(cache=True)
def _heap_push(hf, hs, n, f, s):
    hf[n] = f
    hs[n] = s
    c = n
    while c > 0:
        p = (c - 1) // 2
        if hf[p] > hf[c] or (hf[p] == hf[c] and hs[p] > hs[c]):
            hf[p], hf[c] = hf[c], hf[p]
            hs[p], hs[c] = hs[c], hs[p]
            c = p
        else:
            break
    return n + 1


@nb.njit(cache=True)
def _heap_pop(hf, hs, n):
    f = hf[0]
    s = hs[0]
    n -= 1
    hf[0] = hf[n]
    hs[0] = hs[n]
    c = 0
    while True:
        a = 2 * c + 1
        b = a + 1
        m = c
        if a < n and (hf[a] < hf[m] or (hf[a] == hf[m] and hs[a] < hs[m])):
            m = a
        if b < n and (hf[b] < hf[m] or (hf[b] == hf[m] and hs[b] < hs[m])):
            m = b
        if m == c:
            break
        hf[m], hf[c] = hf[c], hf[m]
        hs[m], hs[c] = hs[c], hs[m]
        c = m
    return f, s, n


@nb.njit(cache=True)
def _block_gap(i, j, gi, gj, radius):
    ex = max(abs(i - gi) - radius, 0)
    ey = max(abs(j - gj) - radius, 0)
    return math.sqrt(ex * ex + ey * ey)


@nb.njit(cache=True)
def astar(edges, allowed, si, sj, sk, gi, gj, radius, ldx, ldy):
    """A* into the goal block around (gi, gj), any heading.

    Returns action codes (1 left, 2 right, 3 forward); empty when the start
    is already inside the block or nothing is reachable (``found`` flag).
    """
    W, H, K = edges.shape
    N = W * H * K
    g = np.full(N, -1, dtype=np.int64)
    parent = np.full(N, -1, dtype=np.int64)
    pact = np.zeros(N, dtype=np.int64)
    closed = np.zeros(N, dtype=np.bool_)
    cap = 4 * N + 16
    hf = np.empty(cap, dtype=np.float64)
    hs = np.empty(cap, dtype=np.int64)
    maxstep = math.sqrt(5.0)

    s0 = (si * H + sj) * K + sk
    g[s0] = 0
    h0 = math.ceil(_block_gap(si, sj, gi, gj, radius) / maxstep - 1e-9)
    n = _heap_push(hf, hs, 0, h0, s0)
    goal = -1
    while n > 0:
        f, s, n = _heap_pop(hf, hs, n)
        if closed[s]:
            continue
        closed[s] = True
        k = s % K
        j = (s // K) % H
        i = s // (K * H)
        if abs(i - gi) <= radius and abs(j - gj) <= radius:
            goal = s
            break
        for a in range(3):
            if a == 0:
                ni, nj, nk = i, j, (k + 1) % K
            elif a == 1:
                ni, nj, nk = i, j, (k + K - 1) % K
            else:
                if not edges[i, j, k]:
                    continue
                ni, nj, nk = i + ldx[k], j + ldy[k], k
                if not allowed[ni, nj]:
                    continue
            ns = (ni * H + nj) * K + nk
            ng = g[s] + 1
            if closed[ns] or (g[ns] >= 0 and g[ns] <= ng):
                continue
            g[ns] = ng
            parent[ns] = s
            pact[ns] = a + 1
            hh = math.ceil(_block_gap(ni, nj, gi, gj, radius) / maxstep - 1e-9)
            n = _heap_push(hf, hs, n, ng + hh, ns)
    if goal < 0:
        return np.empty(0, dtype=np.int64), False
    length = g[goal]
    acts = np.empty(length, dtype=np.int64)
    s = goal
    for q in range(length - 1, -1, -1):
        acts[q] = pact[s]
        s = parent[s]
    return acts, True


@nb.njit(cache=True)
def point_clear(occ, x, y, c, cell):
    """True when no occupied cell center lies closer than ``c`` to (x, y)."""
    W, H = occ.shape
    reach = int(math.ceil(c / cell)) + 1
    ci = int(math.floor(x / cell))
    cj = int(math.floor(y / cell))
    c2 = c * c
    for i in range(ci - reach, ci + reach + 1):
        for j in range(cj - reach, cj + reach + 1):
            if i < 0 or j < 0 or i >= W or j >= H:
                continue
            if occ[i, j]:
                if ((i + 0.5) * cell - x) ** 2 + ((j + 0.5) * cell - y) ** 2 < c2:
                    return False
    return True


@nb.njit(cache=True)
def hybrid_bfs(occ, x0, y0, k0, fdx, fdy, clearance, radius, cell, max_depth):
    """Breadth-first search over continuous noiseless poses, one node per (cell, heading bin).

    Forward successors use the exact displacement table ``fdx, fdy`` so the
    stored poses coincide with a noiseless replay. Returns per-key depth
    (-1 unseen) and the node tables (x, y, k, parent, action, key).
    """
    W, H = occ.shape
    K = 12
    depth = np.full((W, H, K), -1, dtype=np.int32)
    cap = W * H * K
    nx = np.empty(cap, dtype=np.float64)
    ny = np.empty(cap, dtype=np.float64)
    nk = np.empty(cap, dtype=np.int64)
    npar = np.empty(cap, dtype=np.int64)
    nact = np.empty(cap, dtype=np.int64)
    node_of = np.full((W, H, K), -1, dtype=np.int64)
    i0 = int(math.floor(x0 / cell))
    j0 = int(math.floor(y0 / cell))
    nx[0] = x0
    ny[0] = y0
    nk[0] = k0
    npar[0] = -1
    nact[0] = 0
    depth[i0, j0, k0] = 0
    node_of[i0, j0, k0] = 0
    head = 0
    tail = 1
    while head < tail:
        s = head
        head += 1
        x = nx[s]
        y = ny[s]
        k = nk[s]
        ci = int(math.floor(x / cell))
        cj = int(math.floor(y / cell))
        d = depth[ci, cj, k]
        if d >= max_depth:
            continue
        for a in range(1, 4):
            if a == 1:
                tx, ty, tk = x, y, (k + 1) % K
            elif a == 2:
                tx, ty, tk = x, y, (k + K - 1) % K
            else:
                _, blocked = sweep_disk(occ, x, y, fdx[k], fdy[k], radius, cell)
                if blocked:
                    continue
                tx = x + 1.0 * fdx[k]
                ty = y + 1.0 * fdy[k]
                tk = k
                if not point_clear(occ, tx, ty, clearance, cell):
                    continue
            ti = int(math.floor(tx / cell))
            tj = int(math.floor(ty / cell))
            if depth[ti, tj, tk] >= 0:
                continue
            depth[ti, tj, tk] = d + 1
            node_of[ti, tj, tk] = tail
            nx[tail] = tx
            ny[tail] = ty
            nk[tail] = tk
            npar[tail] = s
            nact[tail] = a
            tail += 1
    return depth, node_of, npar[:tail], nact[:tail]
