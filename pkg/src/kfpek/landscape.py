"""Critical points, separating saddles and the barrier labeling of minima."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import PotentialSpec

FICTIVE = "fictive"


@dataclass
class CriticalPoint:
    location: np.ndarray
    value: float
    index: int
    hessian: np.ndarray
    grad_norm: float = 0.0
    degenerate: bool = False
    orders: tuple | None = None
    weights: tuple | None = None

    @property
    def kind(self) -> str:
        return "odd" if self.index % 2 else f"index-{self.index}"

    @property
    def is_minimum(self) -> bool:
        return self.index == 0 and (not self.degenerate or self.orders is not None)

    @property
    def is_saddle(self) -> bool:
        return self.index == 1 and (not self.degenerate or self.orders is not None)

    def to_dict(self) -> dict:
        out = {"location": self.location.tolist(), "value": self.value, "index": self.index,
               "hessian": self.hessian.tolist(), "degenerate": self.degenerate}
        if self.orders is not None:
            out["orders"] = list(self.orders)
            out["weights"] = list(self.weights)
        return out


def find_critical_points(V: PotentialSpec, box: Sequence, seeds_per_axis: int = 24,
                         newton_tol: float = 1e-12, merge_radius: float = 1e-6,
                         degeneracy_tol: float = 1e-8, max_iter: int = 100,
                         degenerate_data: Mapping | None = None) -> list[CriticalPoint]:
    """Newton iteration on grad V from a seed lattice over ``box``.

    ``degenerate_data`` maps a location (tuple) to (weights, orders) for
    non-Morse points; without it such points are returned flagged.
    """
    box = [tuple(map(float, b)) for b in box]
    d = V.d
    axes = [np.linspace(lo, hi, seeds_per_axis) for lo, hi in box]
    x = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    pad = 0.05 * (hi - lo)
    alive = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        g = V.grad(x[alive])
        H = V.hessian(x[alive])
        try:
            step = np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(Hk, gk, rcond=None)[0] for Hk, gk in zip(H, g)])
        xa = x[alive] - step
        bad = ~np.all(np.isfinite(xa), axis=-1) | np.any(xa < lo - pad, axis=-1) | np.any(xa > hi + pad, axis=-1)
        x[alive] = np.where(bad[:, None], np.nan, xa)
        idx = np.flatnonzero(alive)
        alive[idx[bad]] = False
        if not alive.any() or np.max(np.abs(step[~bad]), initial=0.0) < 1e-15:
            break
    ok = np.all(np.isfinite(x), axis=-1)
    x = x[ok]
    if len(x) == 0:
        return []
    gn = np.linalg.norm(V.grad(x), axis=-1)
    keep = gn <= newton_tol
    x, gn = x[keep], gn[keep]
    order = np.argsort(gn, kind="stable")
    reps: list[int] = []
    for k in order:
        if all(np.linalg.norm(x[k] - x[r]) > merge_radius for r in reps):
            reps.append(int(k))
    out = []
    for r in reps:
        loc = x[r]
        H = V.hessian(loc[None])[0]
        w = np.linalg.eigvalsh(H)
        degenerate = bool(np.min(np.abs(w)) < degeneracy_tol)
        cp = CriticalPoint(loc, float(V.value(loc[None])[0]), int(np.sum(w < 0)), H, float(gn[r]), degenerate)
        if degenerate and degenerate_data:
            for key, (wts, ords) in degenerate_data.items():
                if np.linalg.norm(np.asarray(key, dtype=float) - loc) <= 1e-6:
                    if any(int(o) < 2 for o in ords):
                        raise ValueError("orders must be at least 2")
                    cp.orders = tuple(int(o) for o in ords)
                    cp.weights = tuple(float(t) for t in wts)
                    cp.index = int(sum(1 for t in wts if t < 0))
        out.append(cp)
    out.sort(key=lambda c: (c.value, tuple(c.location)))
    return out


# ---------------------------------------------------------------------------
# sublevel connectivity


class UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, i: int) -> int:
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:
            p[i], i = root, p[i]
        return int(root)

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def roots(self) -> np.ndarray:
        r = self.parent.copy()
        while True:
            nr = r[r]
            if np.array_equal(nr, r):
                return r
            r = nr


class SublevelGraph:
    """Uniform cell grid over a box with 2d-neighbour connectivity of strict sublevel sets."""

    def __init__(self, V: PotentialSpec, box: Sequence, n_per_axis: int | Sequence[int] = 400):
        self.box = [tuple(map(float, b)) for b in box]
        d = V.d
        self.shape = tuple([n_per_axis] * d if np.isscalar(n_per_axis) else n_per_axis)
        self.spacing = np.array([(hi - lo) / n for (lo, hi), n in zip(self.box, self.shape)])
        axes = [lo + (np.arange(n) + 0.5) * s for (lo, _), n, s in zip(self.box, self.shape, self.spacing)]
        self.axes = axes
        mesh = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([m.ravel() for m in mesh], axis=-1)
        self.values = V.value(self.centers)
        self._snapshots: dict = {}

    @property
    def ncells(self) -> int:
        return len(self.values)

    def value_resolution(self) -> float:
        """Largest value jump between adjacent cells."""
        vals = self.values.reshape(self.shape)
        jumps = [np.max(np.abs(np.diff(vals, axis=a))) for a in range(vals.ndim) if vals.shape[a] > 1]
        return float(max(jumps, default=0.0))

    def _neighbours(self, k: int) -> list[int]:
        idx = np.unravel_index(k, self.shape)
        out = []
        for a in range(len(self.shape)):
            for s in (-1, 1):
                j = idx[a] + s
                if 0 <= j < self.shape[a]:
                    nb = list(idx)
                    nb[a] = j
                    out.append(int(np.ravel_multi_index(nb, self.shape)))
        return out

    def components_at(self, thresholds: Sequence[float]) -> dict:
        """Component labels of {V < t} for each threshold (label -1 outside the set).

        One sweep in increasing value adds cells to a union-find, so components
        at a higher threshold are unions of components at lower ones.
        """
        ts = sorted(set(float(t) for t in thresholds))
        todo = [t for t in ts if t not in self._snapshots]
        if todo:
            order = np.argsort(self.values, kind="stable")
            uf = UnionFind(self.ncells)
            active = np.zeros(self.ncells, dtype=bool)
            pos = 0
            for t in todo:
                while pos < len(order) and self.values[order[pos]] < t:
                    k = int(order[pos])
                    active[k] = True
                    for nb in self._neighbours(k):
                        if active[nb]:
                            uf.union(k, nb)
                    pos += 1
                self._snapshots[t] = np.where(active, uf.roots(), -1)
        return {t: self._snapshots[t] for t in ts}

    def labels(self, threshold: float) -> np.ndarray:
        return self.components_at([threshold])[float(threshold)]

    def cell_of(self, point) -> int:
        p = np.asarray(point, dtype=float).reshape(-1)
        idx = []
        for a, (lo, _) in enumerate(self.box):
            i = int(np.floor((p[a] - lo) / self.spacing[a]))
            if not 0 <= i < self.shape[a]:
                raise ValueError(f"point {p.tolist()} lies outside the grid box")
            idx.append(i)
        return int(np.ravel_multi_index(idx, self.shape))


def level_epsilon(criticals: Sequence[CriticalPoint], cap: float = 0.05) -> float:
    """Half the smallest gap between distinct critical values (capped)."""
    vals = sorted(set(round(c.value, 12) for c in criticals))
    gaps = [b - a for a, b in zip(vals, vals[1:]) if b - a > 1e-9]
    return min([0.5 * g for g in gaps] + [cap])


def _descend(V: PotentialSpec, p: np.ndarray, target: float, max_iter: int = 20000) -> np.ndarray:
    """Gradient descent with backtracking until V(p) <= target."""
    eta = 0.05
    val = float(V.value(p[None])[0])
    for _ in range(max_iter):
        if val <= target:
            return p
        g = V.grad(p[None])[0]
        while True:
            q = p - eta * g
            qv = float(V.value(q[None])[0])
            if qv < val or eta < 1e-12:
                break
            eta *= 0.5
        p, val = q, qv
        eta = min(eta * 1.5, 0.5)
    return p


@dataclass
class SaddleSides:
    saddle: int
    sides: tuple
    cells: tuple
    separating: bool | None
    diagnostic: str | None = None


class SaddleList(list):
    """List of separating saddles carrying per-saddle side data and diagnostics."""

    def __init__(self, items=(), sides=None, diagnostics=None):
        super().__init__(items)
        self.sides: dict = sides or {}
        self.diagnostics: list = diagnostics or []


def _saddle_sides(V, criticals, graph, eps, k):
    s = criticals[k]
    w, U = np.linalg.eigh(s.hessian)
    e = U[:, int(np.argmin(w))]
    scale = float(np.min(graph.spacing))
    t = s.value - eps
    pts, cells = [], []
    for sign in (1.0, -1.0):
        r = scale
        p = s.location + sign * r * e
        while float(V.value(p[None])[0]) >= s.value and r < 1e3 * scale:
            r *= 2
            p = s.location + sign * r * e
        # keep descending until the containing cell itself lies in {V < t}
        target = t
        for _ in range(64):
            p = _descend(V, p, target)
            try:
                cell = graph.cell_of(p)
            except ValueError:
                return SaddleSides(k, (), (), None, "descent left the grid box")
            if graph.values[cell] < t:
                break
            target -= eps
        pts.append(p)
        cells.append(cell)
    return SaddleSides(k, tuple(pts), tuple(cells), None)


def separating_saddles(V: PotentialSpec, criticals: Sequence[CriticalPoint], graph: SublevelGraph,
                       eps_level: float | None = None) -> SaddleList:
    """Index-1 points whose two local descending sides lie in different components of {V < V(s)}."""
    eps = level_epsilon(criticals) if eps_level is None else eps_level
    sides, diags, sep = {}, [], []
    for k, s in enumerate(criticals):
        if not s.is_saddle:
            continue
        info = _saddle_sides(V, criticals, graph, eps, k)
        sides[k] = info
        if info.diagnostic:
            diags.append({"saddle": s.location.tolist(), "problem": info.diagnostic})
            continue
        lab = graph.labels(s.value - eps)
        la, lb = (int(lab[c]) for c in info.cells)
        if la < 0 or lb < 0:
            info.diagnostic = "resolution insufficient"
            diags.append({"saddle": s.location.tolist(), "problem": "resolution insufficient"})
            continue
        neck = np.sqrt(2 * eps / max(abs(np.linalg.eigvalsh(s.hessian)).max(), 1e-300))
        if np.max(graph.spacing) > neck:
            diags.append({"saddle": s.location.tolist(),
                          "problem": "resolution insufficient: grid spacing exceeds the neck width"})
        info.separating = la != lb
        if info.separating:
            sep.append(s)
    return SaddleList(sep, sides, diags)


# ---------------------------------------------------------------------------
# labeling


@dataclass
class MinimumRecord:
    minimum: CriticalPoint
    level: int
    component: tuple
    saddles: list
    sigma: float
    S: float
    parent: int | None = None

    @property
    def is_global(self) -> bool:
        return self.saddles == [FICTIVE]


@dataclass
class GenerVerdict:
    passed: bool
    witnesses: list

    def __bool__(self) -> bool:
        return self.passed


@dataclass
class Labeling:
    criticals: list
    records: list
    separating: list
    eps_level: float
    violations: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def minima(self) -> list:
        return [r.minimum for r in self.records]

    @property
    def global_minimum(self) -> CriticalPoint:
        return self.records[0].minimum

    def record(self, m) -> MinimumRecord:
        for r in self.records:
            if r.minimum is m or np.allclose(r.minimum.location, getattr(m, "location", m)):
                return r
        raise KeyError("unknown minimum")

    @property
    def E_map(self) -> dict:
        return {i: r.component for i, r in enumerate(self.records)}

    @property
    def j_map(self) -> dict:
        return {i: r.saddles for i, r in enumerate(self.records)}

    @property
    def sigma_map(self) -> dict:
        return {i: r.sigma for i, r in enumerate(self.records)}

    @property
    def S_map(self) -> dict:
        return {i: r.S for i, r in enumerate(self.records)}

    def saddle(self, k: int) -> CriticalPoint:
        return self.criticals[k]

    def to_json(self) -> str:
        rows = []
        for r in self.records:
            glob = r.is_global
            rows.append({
                "location": r.minimum.location.tolist(),
                "value": r.minimum.value,
                "S": None if glob else r.S,
                "sigma": None if glob else r.sigma,
                "global_minimum": glob,
                "saddle_locations": [] if glob else [self.criticals[k].location.tolist() for k in r.saddles],
            })
        return json.dumps({"minima": rows, "eps_level": self.eps_level,
                           "gener": {"passed": not self.violations, "witnesses": self.violations},
                           "diagnostics": self.diagnostics}, indent=2, sort_keys=True)

    def tree_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["child", "parent", "saddle_value", "barrier"])
        for i, r in enumerate(self.records):
            if r.parent is not None:
                w.writerow([i, r.parent, repr(r.sigma), repr(r.S)])
        return buf.getvalue()


class GenerError(ValueError):
    def __init__(self, verdict: GenerVerdict, labeling: Labeling | None = None):
        super().__init__(f"genericity assumption violated: {verdict.witnesses}")
        self.verdict = verdict
        self.labeling = labeling


def label_minima(V: PotentialSpec, criticals: Sequence[CriticalPoint], graph: SublevelGraph,
                 separating: SaddleList | None = None, gener_tol: float = 1e-9,
                 value_tol: float = 1e-9, strict: bool = True) -> Labeling:
    """Barrier labeling by decreasing separating-saddle values.

    At each value sigma, components of {V < sigma} holding no already labeled
    minimum are new; their lowest minimum gets sigma, the separating saddles
    of value sigma on their boundary, and the barrier sigma - V(m).
    """
    criticals = list(criticals)
    eps = level_epsilon(criticals)
    if separating is None:
        separating = separating_saddles(V, criticals, graph, eps)
    minima = [k for k, c in enumerate(criticals) if c.is_minimum]
    if not minima:
        raise ValueError("no local minimum found")
    bad = [c for c in criticals if c.degenerate and c.orders is None]
    diagnostics = list(separating.diagnostics)
    for c in bad:
        diagnostics.append({"point": c.location.tolist(), "problem": "degenerate, needs order and weight data"})
    sep_idx = [k for k, info in separating.sides.items() if info.separating]
    levels: list[float] = []
    for k in sorted(sep_idx, key=lambda k: -criticals[k].value):
        if not levels or levels[-1] - criticals[k].value > value_tol * (1 + abs(levels[-1])):
            levels.append(criticals[k].value)
    lab_below = graph.components_at([s - eps for s in levels] + [s + eps for s in levels])
    violations: list = []
    records: list[MinimumRecord] = []

    def cell_label(lab, k):
        c = graph.cell_of(criticals[k].location)
        if lab[c] < 0:
            raise ValueError(f"minimum at {criticals[k].location.tolist()} is not resolved by the grid")
        return int(lab[c])

    ordered = sorted(minima, key=lambda k: (criticals[k].value, tuple(criticals[k].location)))
    g = ordered[0]
    if len(ordered) > 1 and criticals[ordered[1]].value - criticals[g].value <= gener_tol:
        violations.append({"kind": "tied_minima", "level": 1,
                           "minima": [criticals[g].location.tolist(), criticals[ordered[1]].location.tolist()]})
    records.append(MinimumRecord(criticals[g], 1, (1, 0), [FICTIVE], float("inf"), float("inf")))
    labeled = {g: 0}
    for i, sigma in enumerate(levels, start=2):
        lab = lab_below[sigma - eps]
        # minima labeled at a higher level may sit above this one and own nothing here
        owned = {cell_label(lab, k) for k in labeled if criticals[k].value < sigma - eps}
        groups: dict[int, list[int]] = {}
        for k in ordered:
            if k in labeled:
                continue
            c = cell_label(lab, k)
            if c not in owned:
                groups.setdefault(c, []).append(k)
        level_saddles = [k for k in sep_idx if abs(criticals[k].value - sigma) <= value_tol * (1 + abs(sigma))]
        for comp, members in sorted(groups.items(), key=lambda kv: criticals[kv[1][0]].value):
            m = members[0]
            if len(members) > 1 and criticals[members[1]].value - criticals[m].value <= gener_tol:
                violations.append({"kind": "tied_minima", "level": i,
                                   "minima": [criticals[m].location.tolist(),
                                              criticals[members[1]].location.tolist()]})
            js = [k for k in level_saddles
                  if any(int(lab[c]) == comp for c in separating.sides[k].cells)]
            if not js:
                raise ValueError(f"no separating saddle found on the boundary of the component of "
                                 f"{criticals[m].location.tolist()}")
            S = sigma - criticals[m].value
            records.append(MinimumRecord(criticals[m], i, (i, comp), js, float(sigma), float(S)))
            labeled[m] = len(records) - 1
    unlabeled = [k for k in minima if k not in labeled]
    if unlabeled:
        raise ValueError("minima left unlabeled (check grid resolution): "
                         f"{[criticals[k].location.tolist() for k in unlabeled]}")
    # parents: lowest labeled minimum of the merged component just above sigma
    for n, r in enumerate(records):
        if r.is_global:
            continue
        above = lab_below[r.sigma + eps]
        comp = int(above[graph.cell_of(r.minimum.location)])
        best = None
        for n2, r2 in enumerate(records):
            if n2 == n or r2.level >= r.level:
                continue
            if int(above[graph.cell_of(r2.minimum.location)]) == comp:
                if best is None or r2.minimum.value < records[best].minimum.value:
                    best = n2
        r.parent = best
    # shared boundary saddles
    owner: dict[int, int] = {}
    for n, r in enumerate(records):
        if r.is_global:
            continue
        for k in r.saddles:
            if k in owner:
                violations.append({"kind": "shared_saddle", "saddle": criticals[k].location.tolist(),
                                   "minima": [records[owner[k]].minimum.location.tolist(),
                                              r.minimum.location.tolist()]})
            else:
                owner[k] = n
    labeling = Labeling(criticals, records, [criticals[k] for k in sep_idx], eps, violations, diagnostics)
    if strict and violations:
        raise GenerError(GenerVerdict(False, violations), labeling)
    return labeling


def check_gener(labeling: Labeling) -> GenerVerdict:
    """Unique lowest minimum in every critical component and pairwise disjoint saddle sets."""
    return GenerVerdict(not labeling.violations, list(labeling.violations))


def analyze(V: PotentialSpec, box: Sequence, grid_per_axis: int | None = None,
            seeds_per_axis: int | None = None, strict: bool = True, **kw) -> Labeling:
    """Critical points, separating saddles and labeling in one call."""
    d = V.d
    n = grid_per_axis or (4000 if d == 1 else 300)
    seeds = seeds_per_axis or (60 if d == 1 else 25)
    crit = find_critical_points(V, box, seeds_per_axis=seeds, **kw)
    graph = SublevelGraph(V, box, n)
    return label_minima(V, crit, graph, strict=strict)
