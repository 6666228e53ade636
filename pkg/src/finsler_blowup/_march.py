"""Compiled kernel for the anisotropic fast-marching sweep."""
from __future__ import annotations

import heapq

import numpy as np
from numba import njit

_OFFS = np.array(
    [[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]], dtype=np.int64
)
_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


@njit(cache=True)
def _polar(vx, vy, mode, ainv, table):
    if mode == 0:
        q = vx * (ainv[0, 0] * vx + ainv[0, 1] * vy) + vy * (ainv[1, 0] * vx + ainv[1, 1] * vy)
        return np.sqrt(max(q, 0.0))
    r = np.sqrt(vx * vx + vy * vy)
    if r == 0.0:
        return 0.0
    th = np.arctan2(vy, vx)
    if th < 0:
        th += 2 * np.pi
    n = table.shape[0] - 1
    s = th / (2 * np.pi) * n
    k = min(int(s), n - 1)
    w = s - k
    return r * ((1 - w) * table[k] + w * table[k + 1])


@njit(cache=True)
def _triangle(d1, d2, o1x, o1y, o2x, o2y, h, mode, ainv, table):
    # min over t in [0,1] of t d1 + (1-t) d2 + H°(x - (t y1 + (1-t) y2))
    lo, hi = 0.0, 1.0
    best = min(d1 + h * _polar(-o1x, -o1y, mode, ainv, table),
               d2 + h * _polar(-o2x, -o2y, mode, ainv, table))
    c = hi - _GOLD * (hi - lo)
    d = lo + _GOLD * (hi - lo)

    def f(t):
        return t * d1 + (1 - t) * d2 + h * _polar(
            -(t * o1x + (1 - t) * o2x), -(t * o1y + (1 - t) * o2y), mode, ainv, table
        )

    fc = f(c)
    fd = f(d)
    for _ in range(40):
        if fc < fd:
            hi = d
            d = c
            fd = fc
            c = hi - _GOLD * (hi - lo)
            fc = f(c)
        else:
            lo = c
            c = d
            fc = fd
            d = lo + _GOLD * (hi - lo)
            fd = f(d)
    return min(best, fc, fd)


@njit(cache=True)
def _local(i, j, d, status, h, mode, ainv, table, offs):
    ny, nx = d.shape
    best = np.inf
    for k in range(8):
        a = offs[k]
        b = offs[(k + 1) % 8]
        ia, ja = i + a[1], j + a[0]
        ib, jb = i + b[1], j + b[0]
        ina = 0 <= ia < ny and 0 <= ja < nx and status[ia, ja] == 2
        inb = 0 <= ib < ny and 0 <= jb < nx and status[ib, jb] == 2
        if ina and inb:
            v = _triangle(d[ia, ja], d[ib, jb], a[0], a[1], b[0], b[1], h, mode, ainv, table)
        elif ina:
            v = d[ia, ja] + h * _polar(-a[0], -a[1], mode, ainv, table)
        else:
            continue
        if v < best:
            best = v
    return best


@njit(cache=True)
def march(d, known, region, h, mode, ainv, table):
    """Heap-ordered sweep. ``d`` holds exact values where ``known``; nodes in
    ``region`` are filled in.  Returns the index of the first node whose update
    failed (non-finite), or -1."""
    ny, nx = d.shape
    offs = _OFFS
    status = np.zeros((ny, nx), dtype=np.int8)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in range(ny):
        for j in range(nx):
            if known[i, j]:
                status[i, j] = 2
    for i in range(ny):
        for j in range(nx):
            if status[i, j] != 2:
                continue
            for k in range(8):
                ii, jj = i + offs[k, 1], j + offs[k, 0]
                if 0 <= ii < ny and 0 <= jj < nx and region[ii, jj] and status[ii, jj] == 0:
                    status[ii, jj] = 1
                    v = _local(ii, jj, d, status, h, mode, ainv, table, offs)
                    d[ii, jj] = v
                    heapq.heappush(heap, (v, np.int64(ii * nx + jj)))
    while len(heap) > 0:
        v, idx = heapq.heappop(heap)
        i = idx // nx
        j = idx % nx
        if status[i, j] == 2 or v > d[i, j]:
            continue
        if not np.isfinite(v):
            return idx
        status[i, j] = 2
        for k in range(8):
            ii, jj = i + offs[k, 1], j + offs[k, 0]
            if 0 <= ii < ny and 0 <= jj < nx and region[ii, jj] and status[ii, jj] != 2:
                nv = _local(ii, jj, d, status, h, mode, ainv, table, offs)
                if status[ii, jj] == 0 or nv < d[ii, jj]:
                    status[ii, jj] = 1
                    d[ii, jj] = nv
                    heapq.heappush(heap, (nv, np.int64(ii * nx + jj)))
    return -1
