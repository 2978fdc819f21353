"""Independent reference computations used only by the tests."""

import heapq
import itertools

import numpy as np


def gauss_hermite_average(fn, SS, h, n=64):
    """E[fn(v)] for the probability density proportional to exp(-2 v.SS.v / h).

    Tensor Gauss-Hermite rule after the change of variable w = sqrt(2/h) L^T v
    with SS = L L^T; ``fn`` receives an (N, d') array.
    """
    SS = np.atleast_2d(np.asarray(SS, dtype=float))
    dv = SS.shape[0]
    t, w = np.polynomial.hermite.hermgauss(n)
    nodes = np.array(list(itertools.product(t, repeat=dv)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dv))), axis=1)
    L = np.linalg.cholesky(SS)
    v = np.sqrt(h / 2) * np.linalg.solve(L.T, nodes.T).T
    return np.tensordot(weights, fn(v), axes=(0, 0)) / weights.sum()


def grid_minima(values):
    """Indices of strict local minima of a gridded array (2d-neighbour stencil)."""
    out = []
    for idx in np.ndindex(values.shape):
        c = values[idx]
        ok = True
        for a in range(values.ndim):
            for s in (-1, 1):
                j = list(idx)
                j[a] += s
                if 0 <= j[a] < values.shape[a] and values[tuple(j)] <= c:
                    ok = False
        if ok:
            out.append(idx)
    return out


def bottleneck_barrier(values, start):
    """min over grid paths from ``start`` to a strictly lower cell of the path maximum, minus the start value.

    Returns inf when no lower cell exists (global minimum).
    """
    base = values[start]
    best = {start: base}
    heap = [(base, start)]
    while heap:
        top, idx = heapq.heappop(heap)
        if values[idx] < base:
            return top - base
        if top > best.get(idx, np.inf):
            continue
        for a in range(values.ndim):
            for s in (-1, 1):
                j = list(idx)
                j[a] += s
                if not 0 <= j[a] < values.shape[a]:
                    continue
                j = tuple(j)
                cand = max(top, values[j])
                if cand < best.get(j, np.inf):
                    best[j] = cand
                    heapq.heappush(heap, (cand, j))
    return np.inf


def cell_values(V, box, n):
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return axes, V.value(pts).reshape((n,) * len(box))


def value_resolution(values):
    return max(float(np.max(np.abs(np.diff(values, axis=a)))) for a in range(values.ndim))


def equal_saddle_triple_well():
    """Coefficients of a 1-D triple well whose two saddles have exactly equal values.

    V' = x (x^2 - 1)(x^2 - 4)(1 + e x + g x^3 + k x^4) with e, g chosen so the
    even part of V' integrates to zero between the saddles at -1 and 1 but not
    between the outer minima, which therefore differ in depth; k > 0 makes V
    of even degree and confining without touching either integral.
    """
    base = np.polynomial.Polynomial([0, 4, 0, -5, 0, 1])  # x (x^2-1)(x^2-4)
    A = (base * np.polynomial.Polynomial([0, 1])).integ()
    B = (base * np.polynomial.Polynomial([0, 0, 0, 1])).integ()
    a1, b1 = A(1) - A(-1), B(1) - B(-1)
    g = 0.01
    e = -g * b1 / a1
    dV = base * np.polynomial.Polynomial([1, e, 0, g, 0.02])
    V = dV.integ()
    return {k: float(c) for k, c in enumerate(V.coef) if k > 0 and c != 0}
