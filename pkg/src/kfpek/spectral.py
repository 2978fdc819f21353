"""Finite-difference discretization of P = X + g N and of the Witten Laplacian.

The transport part is central and in split form, so X_h is exactly
antisymmetric. The velocity part is assembled as N_h = sum_j D_j^T D_j with
exponentially fitted one-sided differences D_j ~ h d_vj + 2 (S v)_j, so N_h is
exactly symmetric, positive semidefinite and annihilates the sampled
Maxwellian. A fitted position-space term of size O(dx^2) suppresses the
odd-even decoupling of central transport on a collocated grid.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .model import CoefficientSystem, PotentialSpec, eval_f

MAX_NODES_DEFAULT = 400_000
STABILIZER_DEFAULT = 0.25


class MemoryGuardError(MemoryError):
    def __init__(self, nodes: int, limit: int):
        est = nodes * 60 * 16 / 2 ** 20
        super().__init__(f"{nodes} grid nodes exceed the limit {limit} (about {est:.0f} MiB for LU factors)")
        self.nodes = nodes
        self.limit = limit


class EigenConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridBox:
    """Tensor grid on x-ranges times v-ranges, nodes including the Dirichlet-adjacent ends."""

    x_ranges: tuple
    v_ranges: tuple
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_ranges", tuple(tuple(map(float, r)) for r in self.x_ranges))
        object.__setattr__(self, "v_ranges", tuple(tuple(map(float, r)) for r in self.v_ranges))
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        if len(self.nodes) != self.d + self.dv:
            raise ValueError("one node count per axis is required")
        if min(self.nodes) < 3:
            raise ValueError("at least three nodes per axis")

    @property
    def d(self) -> int:
        return len(self.x_ranges)

    @property
    def dv(self) -> int:
        return len(self.v_ranges)

    @property
    def ranges(self) -> tuple:
        return self.x_ranges + self.v_ranges

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.ranges, self.nodes)]

    @property
    def spacings(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.ranges, self.nodes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def points(self) -> np.ndarray:
        """Node coordinates (size, d + d') in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def split(self, pts: np.ndarray | None = None):
        pts = self.points() if pts is None else pts
        return pts[:, :self.d], pts[:, self.d:]

    def refined(self, factor: int = 2) -> "GridBox":
        return GridBox(self.x_ranges, self.v_ranges, tuple((n - 1) * factor + 1 for n in self.nodes))

    def resolves_velocity(self, h: float) -> bool:
        return all(dv <= np.sqrt(h) / 4 for dv in self.spacings[self.d:])

    @classmethod
    def for_system(cls, sys: CoefficientSystem, level: float, nodes: Sequence[int],
                   x_guess: float = 1.0, samples: int = 33) -> "GridBox":
        """Smallest symmetric-growth box with V >= level on its x faces and |Sigma v|^2 >= level on v faces."""
        d = sys.d
        lo = -np.full(d, float(x_guess))
        hi = np.full(d, float(x_guess))
        for _ in range(200):
            done = True
            for i in range(d):
                for side, arr in ((0, lo), (1, hi)):
                    face = [(lo[k], hi[k]) if k != i else (arr[i], arr[i]) for k in range(d)]
                    grids = np.meshgrid(*[np.linspace(a, b, samples if a != b else 1) for a, b in face],
                                        indexing="ij")
                    pts = np.stack([g.ravel() for g in grids], axis=-1)
                    if np.min(sys.V.value(pts)) < level:
                        arr[i] += 0.05 * (1 if side else -1) * max(1.0, abs(arr[i]))
                        done = False
            if done:
                break
        lam_min = float(np.linalg.eigvalsh(sys.SS)[0])
        vmax = float(np.sqrt(max(level, 1e-3) / lam_min))
        return cls(tuple(zip(lo, hi)), ((-vmax, vmax),) * sys.dv, tuple(nodes))

    def to_dict(self) -> dict:
        return {"x_ranges": [list(r) for r in self.x_ranges], "v_ranges": [list(r) for r in self.v_ranges],
                "nodes": list(self.nodes)}


@dataclass
class OperatorMatrix:
    """P_h = X + N + K with X antisymmetric and N, K symmetric."""

    X: sp.csr_matrix
    N: sp.csr_matrix
    K: sp.csr_matrix
    grid: GridBox | None
    h: float
    weights: float = 1.0
    _P: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def P(self) -> sp.csr_matrix:
        if self._P is None:
            self._P = (self.X + self.N + self.K).tocsr()
        return self._P

    @property
    def shape(self) -> tuple:
        return self.X.shape

    @property
    def symmetric_part(self) -> sp.csr_matrix:
        return (self.N + self.K).tocsr()

    def norm(self) -> float:
        """Induced infinity norm, a cheap upper bound for the spectral radius."""
        return float(abs(self.P).sum(axis=1).max())

    def antisymmetry_defect(self) -> float:
        D = (self.X + self.X.T).tocoo()
        return float(np.max(np.abs(D.data))) if D.nnz else 0.0

    def symmetry_defect(self) -> float:
        S = self.symmetric_part
        D = (S - S.T).tocoo()
        return float(np.max(np.abs(D.data))) if D.nnz else 0.0

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return self.P @ u

    def inner(self, u: np.ndarray, w: np.ndarray) -> complex:
        return complex(np.vdot(w, u)) * self.weights

    def to_coo_text(self, which: str = "P") -> str:
        M = {"P": self.P, "X": self.X, "N": self.N, "K": self.K}[which].tocoo()
        buf = io.StringIO()
        for r, c, v in zip(M.row, M.col, M.data):
            buf.write(f"{int(r)} {int(c)} {float(v)!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_coo_text(text: str, n: int) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for line in text.splitlines():
            if line.strip():
                r, c, v = line.split()
                rows.append(int(r))
                cols.append(int(c))
                vals.append(float(v))
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _axis_pairs(shape: tuple, axis: int):
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    lo = [slice(None)] * len(shape)
    hi = [slice(None)] * len(shape)
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def _transport(coef: np.ndarray, shape: tuple, axis: int, spacing: float, h: float) -> sp.coo_matrix:
    """Split-form central difference of (a h d + h d a) / 2 with Dirichlet ends."""
    p, q = _axis_pairs(shape, axis)
    c = h * (coef[p] + coef[q]) / (4 * spacing)
    n = int(np.prod(shape))
    return sp.coo_matrix((np.concatenate([c, -c]), (np.concatenate([p, q]), np.concatenate([q, p]))),
                         shape=(n, n))


def fitted_difference(phi: np.ndarray, shape: tuple, axis: int, spacing: float, h: float,
                      edge_weight: np.ndarray | None = None) -> sp.csr_matrix:
    """Edge operator u -> (h/dz) (e^{dphi/2} u_{k+1} - e^{-dphi/2} u_k), exact on e^{-phi}."""
    p, q = _axis_pairs(shape, axis)
    dphi = phi[q] - phi[p]
    w = h / spacing
    if edge_weight is not None:
        w = w * np.sqrt(edge_weight)
    e = np.arange(len(p))
    data = np.concatenate([w * np.exp(dphi / 2), -w * np.exp(-dphi / 2)])
    n = int(np.prod(shape))
    return sp.coo_matrix((data, (np.concatenate([e, e]), np.concatenate([q, p]))), shape=(len(p), n)).tocsr()


def discretize_P(sys: CoefficientSystem, h: float, grid: GridBox, stabilizer: float = STABILIZER_DEFAULT,
                 max_nodes: int = MAX_NODES_DEFAULT) -> OperatorMatrix:
    """Assemble P_h on ``grid`` with Dirichlet truncation."""
    if grid.d != sys.d or grid.dv != sys.dv:
        raise ValueError("grid dimensions do not match the system")
    if sys.d + sys.dv > 3:
        raise ValueError("discretization supports d + d' <= 3")
    if grid.size > max_nodes:
        raise MemoryGuardError(grid.size, max_nodes)
    h = float(h)
    shape = grid.shape
    pts = grid.points()
    x, v = grid.split(pts)
    sp_ = grid.spacings
    d, dv = sys.d, sys.dv
    n = grid.size
    X = sp.coo_matrix((n, n))
    for i, a in enumerate(sys.alpha):
        X = X + _transport(a.evaluate(sys.V, x, v, h), shape, i, sp_[i], h)
    for j, b in enumerate(sys.beta):
        X = X + _transport(b.evaluate(sys.V, x, v, h), shape, d + j, sp_[d + j], h)
    phi_v = np.einsum("ni,ij,nj->n", v, sys.SS, v) / h
    g = sys.diffusion_values(x)
    N = sp.csr_matrix((n, n))
    for j in range(dv):
        p, q = _axis_pairs(shape, d + j)
        Dj = fitted_difference(phi_v, shape, d + j, sp_[d + j], h, edge_weight=0.5 * (g[p] + g[q]))
        N = N + (Dj.T @ Dj)
    K = sp.csr_matrix((n, n))
    if stabilizer > 0:
        phi_x = sys.V.value(x) / h
        for i in range(d):
            Di = fitted_difference(phi_x, shape, i, sp_[i], h)
            K = K + (Di.T @ Di) * (stabilizer * sp_[i] ** 2 / h)
    return OperatorMatrix(X.tocsr(), N.tocsr(), K.tocsr(), grid, h, grid.cell_volume)


def discretize_witten(V: PotentialSpec, h: float, x_range: Sequence[float], n: int) -> OperatorMatrix:
    """Delta_V = -h^2 d^2 + |V'|^2 - h V'' as D^T D with the fitted difference D ~ h d + V'."""
    if V.d != 1:
        raise ValueError("the Witten discretization is one-dimensional")
    grid = GridBox((tuple(x_range),), (), (n,))
    x = np.linspace(float(x_range[0]), float(x_range[1]), int(n))
    dx = x[1] - x[0]
    D = fitted_difference(V.value(x[:, None]) / h, (n,), 0, dx, h)
    S = (D.T @ D).tocsr()
    Z = sp.csr_matrix((n, n))
    return OperatorMatrix(Z, S, Z.copy(), grid, float(h), float(dx))


def sampled_maxwellian(sys: CoefficientSystem, h: float, grid: GridBox, shift: float | None = None) -> np.ndarray:
    """e^{-(f - shift)/h} at the nodes (shift defaults to min f on the grid)."""
    x, v = grid.split()
    f = eval_f(sys, x, v)
    s = float(np.min(f)) if shift is None else shift
    return np.exp(-(f - s) / h)


# ---------------------------------------------------------------------------
# spectra


@dataclass
class SpectrumResult:
    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    cluster: np.ndarray
    threshold: float
    gap: float
    shift: float
    norm: float

    @property
    def cluster_values(self) -> np.ndarray:
        return self.values[self.cluster]

    @property
    def n_cluster(self) -> int:
        return int(np.sum(self.cluster))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "re", "im", "in_cluster", "residual"])
        for k, (z, c, r) in enumerate(zip(self.values, self.cluster, self.residuals)):
            w.writerow([k, repr(float(z.real)), repr(float(z.imag)), int(c), repr(float(r))])
        return buf.getvalue()


def small_eigs(P_h: OperatorMatrix, threshold: float, k: int = 6, max_restarts: int = 2,
               tol: float = 0.0) -> SpectrumResult:
    """Eigenvalues of smallest modulus by shift-invert Arnoldi near zero.

    The shift -1e-14 ||P_h|| keeps the factorization regular when the discrete
    kernel is exact. Eigenvalues with |z| <= threshold form the cluster.
    """
    P = P_h.P.tocsc().astype(complex)
    n = P.shape[0]
    norm = P_h.norm()
    shift = -1e-14 * norm
    k = min(k, n - 2)
    if n <= 400:
        vals, vecs = np.linalg.eig(P.toarray())
        order = np.argsort(np.abs(vals))[:k]
        vals, vecs = vals[order], vecs[:, order]
    else:
        ncv = None
        # fixed start vector: ARPACK's random default breaks byte-identical reruns
        v0 = np.random.default_rng(0).standard_normal(n).astype(complex)
        for attempt in range(max_restarts + 1):
            try:
                vals, vecs = sla.eigs(P, k=k, sigma=shift, which="LM", ncv=ncv, tol=tol, v0=v0)
                break
            except sla.ArpackNoConvergence:
                ncv = min(n - 1, 2 * (ncv or max(2 * k + 1, 20)))
                if attempt == max_restarts:
                    raise EigenConvergenceError(f"no convergence after {max_restarts} restarts")
        order = np.argsort(np.abs(vals))
        vals, vecs = vals[order], vecs[:, order]
    res = np.array([np.linalg.norm(P @ vecs[:, i] - vals[i] * vecs[:, i]) / max(np.linalg.norm(vecs[:, i]), 1e-300)
                    for i in range(len(vals))])
    cluster = np.abs(vals) <= threshold
    outside = np.abs(vals.real[~cluster])
    gap = float(outside.min()) if outside.size else float("nan")
    return SpectrumResult(vals, vecs, res, cluster, float(threshold), gap, shift, norm)


def min_real_part(P_h: OperatorMatrix, dense_limit: int = 3000) -> float:
    """Smallest real part of the spectrum (dense for small matrices, else via the symmetric part)."""
    n = P_h.shape[0]
    if n <= dense_limit:
        return float(np.min(np.linalg.eigvals(P_h.P.toarray()).real))
    # Re sigma(P) >= min sigma((P + P^T)/2), and X cancels in the symmetric part
    S = P_h.symmetric_part
    w = sla.eigsh(S, k=1, sigma=-1e-12 * P_h.norm(), which="LM", return_eigenvectors=False)
    return float(w[0])


def cluster_threshold(g_of_h: float, c0_prime: float = 1.0) -> float:
    return 0.5 * c0_prime * float(g_of_h)


# ---------------------------------------------------------------------------
# resolvent


@dataclass
class ResolventReport:
    z: list
    norms: list
    scaled: list
    blow_up: list


def resolvent_probe(P_h: OperatorMatrix, z_list: Sequence[complex], g_of_h: float | None = None,
                    iters: int = 40, seed: int = 0, blow_up: float = 1e6) -> ResolventReport:
    """||(P_h - z)^{-1}|| by power iteration on the normal equations of the factorized shift."""
    P = P_h.P.tocsc().astype(complex)
    n = P.shape[0]
    I = sp.identity(n, dtype=complex, format="csc")
    rng = np.random.default_rng(seed)
    norms = []
    for z in z_list:
        lu = sla.splu((P - complex(z) * I).tocsc())
        u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        u /= np.linalg.norm(u)
        est = 0.0
        for _ in range(iters):
            w = lu.solve(u)
            y = lu.solve(w, trans="H")
            ny = np.linalg.norm(y)
            if ny == 0 or not np.isfinite(ny):
                est = float("inf")
                break
            new = float(np.sqrt(ny))
            u = y / ny
            if abs(new - est) <= 1e-10 * new:
                est = new
                break
            est = new
        norms.append(est)
    scaled = [nv * g_of_h for nv in norms] if g_of_h is not None else []
    return ResolventReport(list(z_list), norms, scaled, [nv > blow_up for nv in norms])


# ---------------------------------------------------------------------------
# semigroup


@dataclass
class SemigroupTrace:
    times: np.ndarray
    distance: np.ndarray
    projections: np.ndarray
    final: np.ndarray
    limit: np.ndarray
    transitions: list
    halvings: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "distance"] + [f"proj{k}" for k in range(self.projections.shape[1])])
        for t, dist, row in zip(self.times, self.distance, self.projections):
            w.writerow([repr(float(t)), repr(float(dist))] + [repr(float(c)) for c in row])
        return buf.getvalue()


def kernel_projection(u0: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """<e^{-f/h}, u0> / ||e^{-f/h}||^2 e^{-f/h}."""
    return kernel * (np.vdot(kernel, u0).real / np.vdot(kernel, kernel).real)


def detect_transitions(times: np.ndarray, values: np.ndarray, flat_slope: float = 0.1) -> list[float]:
    """Times where a quantity falls by a factor e below the level of its last plateau.

    A plateau is a stretch where |d log value / d log t| < ``flat_slope``.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    keep = (t > 0) & (y > 0)
    t, y = t[keep], y[keep]
    if len(t) < 3:
        return []
    lt, ly = np.log(t), np.log(y)
    slope = np.gradient(ly, lt)
    out = []
    ref = None
    for k in range(len(t)):
        if abs(slope[k]) < flat_slope and ref is None:
            ref = y[k]
        elif ref is not None and y[k] < ref / np.e:
            # interpolate the crossing in log-log coordinates
            j = k - 1
            target = np.log(ref / np.e)
            frac = (ly[j] - target) / (ly[j] - ly[k]) if ly[j] != ly[k] else 0.0
            out.append(float(np.exp(lt[j] + frac * (lt[k] - lt[j]))))
            ref = None
    return out


def log_schedule(t_min: float, t_max: float, steps_per_decade: int = 64) -> list[tuple[float, float, int]]:
    """Decade blocks (start, end, steps) covering [0, t_max]; the first block starts at 0."""
    blocks = []
    a = 0.0
    b = float(t_min)
    while a < t_max:
        b = min(b, t_max)
        blocks.append((a, b, int(steps_per_decade)))
        a, b = b, b * 10
    return blocks


def evolve(P_h: OperatorMatrix, u0: np.ndarray, h: float, t_max: float, t_min: float = 1e-2,
           steps_per_decade: int = 64, kernel: np.ndarray | None = None,
           basis: Sequence[np.ndarray] | None = None, rannacher: int = 4,
           growth_limit: float = 10.0) -> SemigroupTrace:
    """Crank-Nicolson for h du/dt + P_h u = 0, one factorization per log-time decade.

    Each decade begins with a few backward Euler substeps to damp the stiff
    modes Crank-Nicolson leaves undamped. A step whose norm grows beyond
    ``growth_limit`` times the initial norm is redone with half the step.
    """
    P = P_h.P.tocsc()
    n = P.shape[0]
    I = sp.identity(n, format="csc")
    u = np.asarray(u0, dtype=float).copy()
    norm0 = np.linalg.norm(u)
    limit = kernel_projection(u, kernel) if kernel is not None else np.zeros(n)
    basis = [np.asarray(b, dtype=float) for b in (basis or [])]
    times, dist, proj = [0.0], [np.linalg.norm(u - limit)], [[float(np.dot(b, u)) for b in basis]]
    halvings = 0
    for a, b, steps in log_schedule(t_min, t_max, steps_per_decade):
        nsub = steps
        while True:
            dt = (b - a) / nsub
            c = dt / (2 * h)
            be = sla.splu((I + 2 * c * P).tocsc())
            lhs = sla.splu((I + c * P).tocsc())
            rhs = (I - c * P).tocsr()
            w = u.copy()
            ok = True
            local_t, local_d, local_p = [], [], []
            for k in range(nsub):
                w = be.solve(w) if k < rannacher else lhs.solve(rhs @ w)
                if not np.all(np.isfinite(w)) or np.linalg.norm(w) > growth_limit * max(norm0, 1e-300):
                    ok = False
                    break
                local_t.append(a + (k + 1) * dt)
                local_d.append(np.linalg.norm(w - limit))
                local_p.append([float(np.dot(bb, w)) for bb in basis])
            if ok:
                break
            nsub *= 2
            halvings += 1
            if halvings > 20:
                raise FloatingPointError("time stepping unstable after repeated halving")
        u = w
        times += local_t
        dist += local_d
        proj += local_p
    times_a = np.array(times)
    dist_a = np.array(dist)
    proj_a = np.array(proj) if basis else np.zeros((len(times), 0))
    trans = detect_transitions(times_a[1:], dist_a[1:])
    return SemigroupTrace(times_a, dist_a, proj_a, u, limit, trans, halvings)
