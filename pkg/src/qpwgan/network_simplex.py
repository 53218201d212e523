"""Network simplex for the discrete transportation problem.

Solves ``min <C, G>`` over nonnegative ``G`` with row sums ``a`` and column sums
``b``. The basis is a spanning tree over the bipartite graph of ``m`` supply
nodes and ``n`` demand nodes (``m + n - 1`` basic cells, zero-flow cells kept
for degeneracy). Node potentials ``u, v`` satisfy ``u_i + v_j = C_ij`` on the
tree and are the optimal dual variables at termination, with ``u_0 = 0``.

Pricing is Dantzig's rule over the full reduced-cost matrix. After a long run
of degenerate pivots the solver falls back to Bland's rule, which cannot cycle.
"""

from __future__ import annotations

from collections import deque

import numpy as np


class SimplexError(RuntimeError):
    pass


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    m, n = len(a), len(b)
    ra, rb = a.copy(), b.copy()
    cells, flows = [], []
    i = j = 0
    while True:
        x = min(ra[i], rb[j])
        cells.append((i, j))
        flows.append(x)
        ra[i] -= x
        rb[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if (ra[i] <= 0 and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return cells, flows


class _Tree:
    """Spanning tree of basic cells; nodes ``0..m-1`` rows, ``m..m+n-1`` columns."""

    def __init__(self, m: int, n: int, cells, flows):
        self.m, self.n = m, n
        self.adj: list[dict[int, int]] = [dict() for _ in range(m + n)]
        self.cells: list[tuple[int, int]] = []
        self.flow: list[float] = []
        for (i, j), x in zip(cells, flows):
            self.add(i, j, x)

    def add(self, i: int, j: int, x: float) -> None:
        k = len(self.cells)
        self.cells.append((i, j))
        self.flow.append(x)
        self.adj[i][self.m + j] = k
        self.adj[self.m + j][i] = k

    def replace(self, k: int, i: int, j: int, x: float) -> None:
        oi, oj = self.cells[k]
        del self.adj[oi][self.m + oj]
        del self.adj[self.m + oj][oi]
        self.cells[k] = (i, j)
        self.flow[k] = x
        self.adj[i][self.m + j] = k
        self.adj[self.m + j][i] = k

    def potentials(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.m
        pot = np.full(m + self.n, np.nan)
        pot[0] = 0.0
        queue = deque([0])
        while queue:
            a = queue.popleft()
            for b in self.adj[a]:
                if np.isnan(pot[b]):
                    if a < m:
                        pot[b] = C[a, b - m] - pot[a]
                    else:
                        pot[b] = C[b, a - m] - pot[a]
                    queue.append(b)
        if np.isnan(pot).any():
            raise SimplexError("basis is not a spanning tree")
        return pot[:m], pot[m:]

    def path(self, src: int, dst: int) -> list[int]:
        """Cell indices along the tree path from node ``src`` to node ``dst``."""
        parent = {src: (-1, -1)}
        queue = deque([src])
        while queue:
            a = queue.popleft()
            if a == dst:
                break
            for b, k in self.adj[a].items():
                if b not in parent:
                    parent[b] = (a, k)
                    queue.append(b)
        out = []
        node = dst
        while node != src:
            node, k = parent[node]
            out.append(k)
        out.reverse()
        return out


def solve_transport(a, b, C, *, tol: float = 1e-9, max_iter: int | None = None):
    """Return ``(G, u, v, n_pivots)`` for the transport problem ``(a, b, C)``.

    A cell enters the basis when its reduced cost is below ``-tol``; the
    threshold is raised to a few ulps of ``max|C|`` when that is larger, so
    roundoff in the potentials never triggers a pivot.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    m, n = len(a), len(b)
    if C.shape != (m, n):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({m}, {n})")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError("marginals have different total mass")
    scale = float(np.abs(C).max()) if C.size else 0.0
    eps = max(tol, 64 * np.finfo(float).eps * scale)
    if max_iter is None:
        max_iter = 50 * (m + n) * max(m, n) + 1000
    tree = _Tree(m, n, *_northwest_corner(a, b))

    degenerate_run = 0
    bland = False
    pivots = 0
    while True:
        u, v = tree.potentials(C)
        reduced = C - u[:, None] - v[None, :]
        if bland:
            neg = np.flatnonzero(reduced.ravel() < -eps)
            if len(neg) == 0:
                break
            flat = int(neg[0])
        else:
            flat = int(np.argmin(reduced))
            if reduced.flat[flat] >= -eps:
                break
        ei, ej = divmod(flat, n)
        path = tree.path(ei, m + ej)
        # The first path edge shares row ei with the entering cell, so it loses flow.
        minus = path[0::2]
        plus = path[1::2]
        theta = min(tree.flow[k] for k in minus)
        candidates = [k for k in minus if tree.flow[k] == theta]
        leave = min(candidates, key=lambda k: tree.cells[k]) if bland else candidates[-1]
        for k in minus:
            tree.flow[k] -= theta
        for k in plus:
            tree.flow[k] += theta
        tree.replace(leave, ei, ej, theta)
        pivots += 1
        if theta == 0:
            degenerate_run += 1
            if degenerate_run > 10 * (m + n):
                bland = True
        else:
            degenerate_run = 0
        if pivots > max_iter:
            raise SimplexError(f"no convergence after {pivots} pivots")

    G = np.zeros((m, n))
    for (i, j), x in zip(tree.cells, tree.flow):
        G[i, j] += x
    return G, u, v, pivots
