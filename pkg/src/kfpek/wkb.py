"""Truncated WKB phase corrections at saddle points.

The phase ell(X, h) ~ sum_j h^j ell_j makes the quasimode profile
exp(-ell^2 / 2h) compatible with the kinetic operator. It solves w = 0 with

    w = alpha.d_x ell + beta.d_v ell + g (4 S v.d_v ell + ell |d_v ell|^2 - h lap_v ell),

expanded at (s, 0) in shifted coordinates X = (x - s, v). All series are
polynomials in the layout (x, v, h) truncated in space degree and h order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import mpmath
import numpy as np

from .model import CoefficientSystem, Field
from .poly import Poly, monomials

K_MAX_DEFAULT = 6
J_MAX_DEFAULT = 2


class SimpleAssumptionError(ValueError):
    def __init__(self, message: str, eigenvalues):
        super().__init__(f"{message}; eigenvalues: {list(eigenvalues)}")
        self.eigenvalues = list(eigenvalues)


class NoLinearPartError(ValueError):
    """alpha^0 has no velocity-linear part at the saddle: use the degenerate construction."""


@dataclass(frozen=True)
class Caps:
    K_max: int = K_MAX_DEFAULT
    J_max: int = J_MAX_DEFAULT


@dataclass
class MonomialSeries:
    """ell = sum coefficients h^j x^a v^b, stored as a Poly in (x, v, h)."""

    poly: Poly
    d: int
    dv: int
    caps: Caps

    def __post_init__(self):
        K, J = self.caps.K_max, self.caps.J_max
        hv = self.d + self.dv
        for e in self.poly.terms:
            if e[hv] > J or sum(e[:hv]) > K:
                raise ValueError(f"coefficient {e} exceeds the caps {self.caps}")

    @property
    def nvars(self) -> int:
        return self.d + self.dv + 1

    def coefficient(self, j: int, a: Sequence[int], b: Sequence[int]):
        return self.poly.coefficient(tuple(a) + tuple(b) + (j,))

    def items(self):
        hv = self.d + self.dv
        for e, c in sorted(self.poly.terms.items(), key=lambda t: (t[0][hv], t[0][:hv])):
            yield e[hv], e[:self.d], e[self.d:hv], c

    def h_part(self, j: int) -> Poly:
        hv = self.d + self.dv
        return Poly(self.nvars, {e[:hv] + (0,): c for e, c in self.poly.terms.items() if e[hv] == j})

    def space_part(self, k: int) -> Poly:
        return self.poly.homogeneous(k, range(self.d + self.dv))

    def __add__(self, other: "MonomialSeries") -> "MonomialSeries":
        return MonomialSeries((self.poly + other.poly), self.d, self.dv, self.caps)

    def __neg__(self) -> "MonomialSeries":
        return MonomialSeries(-self.poly, self.d, self.dv, self.caps)

    def mul(self, other: "MonomialSeries") -> "MonomialSeries":
        p = self.poly.mul(other.poly, self.caps.K_max, range(self.d + self.dv))
        return MonomialSeries(_trunc_h(p, self.caps.J_max), self.d, self.dv, self.caps)

    def deriv(self, i: int) -> "MonomialSeries":
        return MonomialSeries(self.poly.deriv(i), self.d, self.dv, self.caps)

    def to_float(self) -> "MonomialSeries":
        return MonomialSeries(self.poly.map_coeffs(float), self.d, self.dv, self.caps)

    def evaluate(self, X, h) -> np.ndarray:
        """Evaluate at shifted points X (..., d + d') and h."""
        X = np.asarray(X, dtype=float)
        hb = np.broadcast_to(np.asarray(h, dtype=float), X.shape[:-1])[..., None]
        return self.poly.map_coeffs(float).evaluate(np.concatenate([X, hb], axis=-1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "a", "b", "coef"])
        for j, a, b, c in self.items():
            w.writerow([j, ";".join(map(str, a)), ";".join(map(str, b)), repr(float(c))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, d: int, dv: int, caps: Caps | None = None) -> "MonomialSeries":
        rows = list(csv.DictReader(io.StringIO(text)))
        terms = {}
        for r in rows:
            a = tuple(int(k) for k in r["a"].split(";"))
            b = tuple(int(k) for k in r["b"].split(";"))
            terms[a + b + (int(r["j"]),)] = float(r["coef"])
        p = Poly(d + dv + 1, terms)
        if caps is None:
            caps = Caps(max(p.degree(range(d + dv)), 0), max(p.degree([d + dv]), 0))
        return cls(p, d, dv, caps)


def _trunc_h(p: Poly, J: int) -> Poly:
    hv = p.nvars - 1
    return p.select(lambda e: e[hv] <= J)


# ---------------------------------------------------------------------------
# local expansion of the coefficients


class _Numbers:
    """Float or multiprecision arithmetic for the local computation."""

    def __init__(self, precision: int | None):
        self.precision = precision
        self.mp = None
        if precision is not None:
            self.mp = mpmath.mp.clone()
            self.mp.dps = int(precision)

    def num(self, c):
        return float(c) if self.mp is None else self.mp.mpf(c)

    def sqrt(self, c):
        return np.sqrt(float(c)) if self.mp is None else self.mp.sqrt(c)

    def solve(self, A, b):
        if self.mp is None:
            return np.linalg.solve(np.array(A, dtype=float), np.array(b, dtype=float))
        sol = self.mp.lu_solve(self.mp.matrix(A), self.mp.matrix(b))
        return [sol[i] for i in range(len(b))]

    def eig(self, A):
        if self.mp is None:
            w, U = np.linalg.eig(np.array(A, dtype=float))
            return list(w), [U[:, k] for k in range(U.shape[1])]
        w, U = self.mp.eig(self.mp.matrix(A))
        n = len(w)
        return list(w), [[U[i, k] for i in range(n)] for k in range(n)]


def refine_critical_point(sys: CoefficientSystem, s, precision: int | None, iters: int = 60):
    """Newton polish of a critical point of V in the working precision."""
    nm = _Numbers(precision)
    V = sys.V
    if nm.mp is None:
        x = np.asarray(s, dtype=float).ravel()
        for _ in range(iters):
            step = np.linalg.solve(V.hessian(x[None])[0], V.grad(x[None])[0])
            x = x - step
            if np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(x))):
                break
        return [float(c) for c in x]
    d = V.d
    x = [nm.num(c) for c in np.asarray(s, dtype=float).ravel()]
    grad = [V.derivative_poly(tuple(1 if k == i else 0 for k in range(d))) for i in range(d)]
    hess = [[V.derivative_poly(tuple((k == i) + (k == j) for k in range(d))) for j in range(d)] for i in range(d)]
    for _ in range(iters):
        g = [p.evaluate_exact(x) for p in grad]
        H = [[p.evaluate_exact(x) for p in row] for row in hess]
        step = nm.solve(H, g)
        x = [xi - si for xi, si in zip(x, step)]
        if max(abs(si) for si in step) < nm.mp.mpf(10) ** (-nm.mp.dps + 5):
            break
    return x


class LocalExpansion:
    """Taylor data of the coefficient system at (s, 0) in shifted coordinates."""

    def __init__(self, sys: CoefficientSystem, s, K: int, J: int, precision: int | None = None):
        self.sys = sys
        self.nm = _Numbers(precision)
        self.d, self.dv = sys.d, sys.dv
        self.n = sys.nvars
        self.space = list(range(self.d + self.dv))
        self.hv = self.n - 1
        self.K, self.J = K, J
        self.s = refine_critical_point(sys, s, precision)
        if sys.V.tail is not None and precision is not None:
            raise ValueError("multiprecision expansion supports polynomial potentials only")
        self.alpha = [self._taylor(f) for f in sys.alpha]
        self.beta = [self._taylor(f) for f in sys.beta]
        g = sys.diffusion_poly()
        self.g = _trunc_h(self._shift(g).truncate(K, self.space), J)
        SS = sys.SS
        self.SS = [[self.nm.num(SS[i, j]) for j in range(self.dv)] for i in range(self.dv)]
        self.SSv = [Poly(self.n, {tuple(1 if k == self.d + j else 0 for k in range(self.n)): self.SS[i][j]
                                  for j in range(self.dv)}) for i in range(self.dv)]

    def _conv(self, p: Poly) -> Poly:
        return p.map_coeffs(self.nm.num)

    def _shift(self, p: Poly) -> Poly:
        center = list(self.s) + [self.nm.num(0)] * (self.dv + 1)
        return self._conv(p).shift(center)

    def _taylor(self, f: Field) -> Poly:
        out = Poly(self.n)
        V = self.sys.V
        for key, p in f.terms.items():
            term = _trunc_h(self._shift(p).truncate(self.K, self.space), self.J)
            for gam in key:
                if V.tail is None:
                    tp = self._conv(V.derivative_poly(gam)).shift(self.s).truncate(self.K)
                else:
                    tp = V.derivative_taylor(gam, [float(c) for c in self.s], self.K)
                tp = tp.embed(self.n, list(range(self.d)))
                term = term.mul(tp, self.K, self.space)
            out = out + term
        return _trunc_h(out.truncate(self.K, self.space), self.J)

    def h0(self, p: Poly) -> Poly:
        return p.select(lambda e: e[self.hv] == 0)

    def linear_jacobian(self):
        """Jacobian at X = 0 of the h^0 drift (alpha, beta + 4 g S v) as nested lists."""
        n_s = self.d + self.dv
        fields = [self.h0(a) for a in self.alpha]
        g0 = self.h0(self.g).coefficient((0,) * self.n)
        fields += [self.h0(b) + p.scale(4 * g0) for b, p in zip(self.beta, self.SSv)]
        Jm = [[self.nm.num(0)] * n_s for _ in range(n_s)]
        for i, f in enumerate(fields):
            for j in range(n_s):
                e = tuple(1 if k == j else 0 for k in range(self.n))
                Jm[i][j] = self.nm.num(f.coefficient(e))
        return Jm, g0

    def residual(self, ell: Poly, K: int | None = None, J: int | None = None) -> Poly:
        """w(ell) truncated at space degree K and h order J."""
        K = self.K if K is None else K
        J = self.J if J is None else J
        sp = self.space
        out = Poly(self.n)
        for i, a in enumerate(self.alpha):
            out = out + a.mul(ell.deriv(i), K, sp)
        dvl = [ell.deriv(self.d + j) for j in range(self.dv)]
        for j, b in enumerate(self.beta):
            out = out + b.mul(dvl[j], K, sp)
        inner = Poly(self.n)
        sq = Poly(self.n)
        lap = Poly(self.n)
        for j in range(self.dv):
            inner = inner + self.SSv[j].mul(dvl[j], K, sp).scale(4)
            sq = sq + dvl[j].mul(dvl[j], K, sp)
            lap = lap + dvl[j].deriv(self.d + j)
        hp = Poly.var(self.n, self.hv, self.nm.num(1))
        inner = inner + ell.mul(sq, K, sp) - hp.mul(lap, K, sp)
        out = out + self.g.mul(inner, K, sp)
        return _trunc_h(out.truncate(K, sp), J)


# ---------------------------------------------------------------------------
# non-degenerate saddles


@dataclass
class SaddleFrame:
    s: list
    H: np.ndarray
    M: np.ndarray
    M_beta: np.ndarray
    Lambda: object
    mu: object
    xi: list
    eigenvalues: list
    g_s: object = 1.0
    precision: int | None = None
    expansion: LocalExpansion | None = field(default=None, repr=False)

    @property
    def xi_x(self):
        return self.xi[:len(self.s)]

    @property
    def xi_v(self):
        return self.xi[len(self.s):]

    def Lambda_float(self) -> np.ndarray:
        return np.array([[float(c) for c in row] for row in self.Lambda])


def build_lambda(sys: CoefficientSystem, s, caps: Caps | None = None, precision: int | None = None,
                 tol: float = 1e-10) -> SaddleFrame:
    """Linearization at a saddle: Lambda, the stable eigenvalue -mu and the eigenvector xi.

    Lambda is the transpose of the Jacobian of the h^0 drift (alpha, beta + 4 g S v);
    for alpha^0 = M v it equals [[0, -H M S^-1 / 2], [M^T, 4 S]].
    """
    caps = caps or Caps()
    loc = LocalExpansion(sys, s, caps.K_max, caps.J_max, precision)
    nm = loc.nm
    d, dv = sys.d, sys.dv
    Jm, g0 = loc.linear_jacobian()
    M = np.array([[float(Jm[i][d + j]) for j in range(dv)] for i in range(d)])
    if np.all(M == 0):
        raise NoLinearPartError("alpha has no velocity-linear part at the saddle")
    sf = np.array([float(c) for c in loc.s])
    H = sys.V.hessian(sf[None])[0]
    M_beta = -0.5 * np.linalg.solve(sys.SS, M.T @ H)
    n_s = d + dv
    Lam = [[Jm[j][i] for j in range(n_s)] for i in range(n_s)]
    w, U = nm.eig(Lam)
    wf = [complex(x) for x in w]
    neg = [k for k, x in enumerate(wf) if x.real < -tol]
    if len(neg) != 1:
        raise SimpleAssumptionError("exactly one eigenvalue with negative real part is required", wf)
    k = neg[0]
    if abs(wf[k].imag) > tol:
        raise SimpleAssumptionError("the negative eigenvalue must be real", wf)
    if sum(1 for x in wf if abs(x - wf[k]) <= 1e3 * tol) > 1:
        raise SimpleAssumptionError("the negative eigenvalue must be simple", wf)
    mu = -(w[k].real if hasattr(w[k], "real") else w[k])
    vec = [c.real if hasattr(c, "real") else c for c in U[k]]
    vnorm2 = sum(c * c for c in vec[d:])
    if float(vnorm2) == 0:
        raise SimpleAssumptionError("the stable eigenvector has no velocity component", wf)
    scale = nm.sqrt(mu / (g0 * vnorm2))
    vec = [c * scale for c in vec]
    first = next(c for c in vec[d:] if abs(float(c)) > 0)
    if float(first) < 0:
        vec = [-c for c in vec]
    return SaddleFrame(list(loc.s), H, M, M_beta, Lam, mu, vec, wf, g0, precision, loc)


def _linear_form(n: int, coeffs: Sequence, nm: _Numbers) -> Poly:
    return Poly(n, {tuple(1 if k == i else 0 for k in range(n)): c for i, c in enumerate(coeffs)})


def lzero_matrix(frame: SaddleFrame, degree: int):
    """Matrix of L0 p = (Upsilon X).grad p + mu p on homogeneous polynomials of ``degree``.

    Upsilon = Lambda^T + 2 g(s) [0; xi_v] xi^T. Returns (matrix, basis exponents).
    """
    loc = frame.expansion
    nm = loc.nm
    n, n_s = loc.n, loc.d + loc.dv
    d = loc.d
    Jm = [[frame.Lambda[j][i] for j in range(n_s)] for i in range(n_s)]
    Ups = [[Jm[i][j] + (2 * frame.g_s * frame.xi[i] * frame.xi[j] if i >= d else 0) for j in range(n_s)]
           for i in range(n_s)]
    rows = [_linear_form(n, Ups[i], nm) for i in range(n_s)]
    basis = monomials(n, degree, range(n_s))
    index = {e: k for k, e in enumerate(basis)}
    N = len(basis)
    A = [[nm.num(0)] * N for _ in range(N)]
    for col, e in enumerate(basis):
        m = Poly(n, {e: nm.num(1)})
        img = m.scale(frame.mu)
        for i in range(n_s):
            img = img + rows[i] * m.deriv(i)
        for ee, c in img.terms.items():
            A[index[ee]][col] = c
    return A, basis


def _solve_degree(frame: SaddleFrame, R: Poly, degree: int, j: int) -> Poly:
    """Homogeneous p of space degree ``degree`` (times h^j) with L0 p = -R."""
    loc = frame.expansion
    A, basis = lzero_matrix(frame, degree)
    rhs = []
    for e in basis:
        rhs.append(-R.coefficient(e[:loc.hv] + (j,)))
    sol = loc.nm.solve(A, [loc.nm.num(c) for c in rhs])
    out = {}
    for e, c in zip(basis, sol):
        if c != 0:
            out[e[:loc.hv] + (j,)] = c
    return Poly(loc.n, out)


def _graded(p: Poly, degree: int, j: int, loc: LocalExpansion) -> Poly:
    return p.select(lambda e: e[loc.hv] == j and sum(e[:loc.hv]) == degree)


def solve_eikonal_s1(frame: SaddleFrame, caps: Caps | None = None) -> MonomialSeries:
    """ell_0 degree by degree: L0 ell_{0,k} = -R_{0,k} for k = 2..K_max."""
    caps = caps or Caps()
    loc = frame.expansion
    ell = _linear_form(loc.n, frame.xi, loc.nm)
    for k in range(2, caps.K_max + 1):
        R = _graded(loc.residual(ell, k, 0), k, 0, loc)
        if R.is_zero():
            continue
        ell = ell + _solve_degree(frame, R, k, 0)
    return MonomialSeries(ell, loc.d, loc.dv, Caps(caps.K_max, caps.J_max))


def solve_transport_s1(frame: SaddleFrame, ell0: MonomialSeries, caps: Caps | None = None) -> MonomialSeries:
    """ell_j for j = 1..J_max; each degree is solved after the lower ones (L0 + raising terms)."""
    caps = caps or Caps()
    loc = frame.expansion
    ell = ell0.poly
    for j in range(1, caps.J_max + 1):
        for k in range(0, caps.K_max + 1):
            R = _graded(loc.residual(ell, k, j), k, j, loc)
            if R.is_zero():
                continue
            ell = ell + _solve_degree(frame, R, k, j)
    return MonomialSeries(ell, loc.d, loc.dv, caps)


def lzero_spectrum(frame: SaddleFrame, degree: int) -> np.ndarray:
    A, _ = lzero_matrix(frame, degree)
    return np.linalg.eigvals(np.array([[float(c) for c in row] for row in A], dtype=float))


# ---------------------------------------------------------------------------
# velocity-degenerate saddles (d = d' = 1, alpha = v^2 - h)


@dataclass
class DegenerateFrame:
    s: list
    theta: list
    xi_x: object
    precision: int | None = None
    expansion: LocalExpansion | None = field(default=None, repr=False)


def solve_situation2(sys: CoefficientSystem, s, caps: Caps | None = None,
                     precision: int | None = None) -> tuple[MonomialSeries, DegenerateFrame]:
    """Recursion over (j, a, b) for the velocity-degenerate one-dimensional model.

    Rows b = 2 fix ell_{j,a,0} through L = -theta_1 (x d_x + 1) v^2 with the link
    v d_x ell_{j,a+1,0} + d_v ell_{j,a,2} = 0; rows b >= 4 invert v d_v.
    """
    caps = caps or Caps()
    if sys.d != 1 or sys.dv != 1:
        raise ValueError("the degenerate construction is one-dimensional")
    K, J = caps.K_max, caps.J_max
    loc = LocalExpansion(sys, s, K + 2, J, precision)
    nm = loc.nm
    V = sys.V
    s0 = loc.s
    theta = []
    for k in range(1, K + 2):
        coef = V.derivative_poly((k + 1,))
        val = coef.evaluate_exact(s0) if nm.mp is not None else float(coef.evaluate(np.array([[float(s0[0])]]))[0])
        fact = 1
        for i in range(2, k + 1):
            fact *= i
        theta.append(2 * val / fact)
    th1 = theta[0]
    if float(th1) >= 0:
        raise ValueError("theta_1 >= 0: the point is not a saddle")
    xi = nm.sqrt(-th1)
    n = 3

    def mono(a, b, j, c):
        return Poly(n, {(a, b, j): c})

    ell = mono(1, 0, 0, xi) + mono(0, 2, 0, -xi / 2)

    def w_coef(p, j, a, b):
        return loc.residual(p, a + b, j).coefficient((a, b, j))

    for j in range(0, J + 1):
        a_start = 2 if j == 0 else 0
        for a in range(a_start, K):
            # unknown u = ell_{j,a,0}; the link fixes ell_{j,a-1,2} = -(a u / 2)
            base = w_coef(ell, j, a, 2)
            u = -base / (-th1 * (a + 1))
            upd = mono(a, 0, j, u)
            if a >= 1:
                upd = upd + mono(a - 1, 2, j, -a * u / 2)
            ell = ell + upd
        for b in range(4, K + 1, 2):
            for a in range(0, K - b + 1):
                base = w_coef(ell, j, a, b)
                ell = ell + mono(a, b, j, -base / b)
    ell = ell.select(lambda e: e[0] + e[1] <= K)
    frame = DegenerateFrame(list(s0), theta, xi, precision, loc)
    return MonomialSeries(ell, 1, 1, caps), frame


# ---------------------------------------------------------------------------
# structural checks and prefactor data


@dataclass
class HessianVerdict:
    passed: bool
    det_modified: float
    det_f: float
    positive_definite: bool
    min_eigenvalue: float


def f_hessian(sys: CoefficientSystem, s) -> np.ndarray:
    """Hess f at (s, 0) = blockdiag(Hess V(s), 2 S)."""
    d, dv = sys.d, sys.dv
    out = np.zeros((d + dv, d + dv))
    out[:d, :d] = sys.V.hessian(np.asarray(s, dtype=float).reshape(1, d))[0]
    out[d:, d:] = 2 * sys.SS
    return out


def modified_hessian(ell0: MonomialSeries, f_hess: np.ndarray) -> np.ndarray:
    """Hess (f + ell_0^2 / 2) at the saddle, for ell_0 vanishing there."""
    n_s = ell0.d + ell0.dv
    n = n_s + 1
    grad = np.array([float(ell0.poly.coefficient(tuple(1 if k == i else 0 for k in range(n)))) for i in range(n_s)])
    quad = np.zeros((n_s, n_s))
    l0 = float(ell0.poly.coefficient((0,) * n))
    for i in range(n_s):
        for j in range(n_s):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            c = float(ell0.poly.coefficient(tuple(e)))
            quad[i, j] = c * (2 if i == j else 1)
    return np.asarray(f_hess, dtype=float) + np.outer(grad, grad) + l0 * quad


def hessian_identity_check(ell0: MonomialSeries, f_hessian_at_s: np.ndarray, tol: float = 1e-8) -> HessianVerdict:
    """det Hess(f + ell_0^2/2) = -det Hess f, and the modified Hessian is positive definite."""
    Hm = modified_hessian(_h0_series(ell0), f_hessian_at_s)
    dm = float(np.linalg.det(Hm))
    df = float(np.linalg.det(f_hessian_at_s))
    w = np.linalg.eigvalsh(0.5 * (Hm + Hm.T))
    pd = bool(w[0] > 0)
    ok = abs(dm + df) <= tol * max(1.0, abs(df)) and pd
    return HessianVerdict(bool(ok), dm, df, pd, float(w[0]))


def _h0_series(ell: MonomialSeries) -> MonomialSeries:
    hv = ell.d + ell.dv
    return MonomialSeries(ell.poly.select(lambda e: e[hv] == 0), ell.d, ell.dv, ell.caps)


@dataclass
class PrefactorData:
    a: float
    b: int
    situation: int


def extract_a_b(ell: MonomialSeries, frame, sys: CoefficientSystem | None = None) -> PrefactorData:
    """(a, b) of the saddle: a = |d_v ell_0(s)|^2 (times g(s)), b = 0 when it is nonzero.

    When d_v ell_0 vanishes at s (velocity-degenerate case) b = 1 and a is the
    velocity average of |d_v ell_0|^2 / h under exp(-(2f + ell_0^2)/h) at leading
    order, which for the one-dimensional model equals xi_x^2 = 2 |V''(s)|.
    """
    n_s = ell.d + ell.dv
    n = n_s + 1
    gv = [float(ell.poly.coefficient(tuple(1 if k == ell.d + j else 0 for k in range(n)))) for j in range(ell.dv)]
    g_s = float(getattr(frame, "g_s", 1.0))
    a0 = g_s * sum(c * c for c in gv)
    if a0 > 1e-14:
        return PrefactorData(float(a0), 0, 1)
    if isinstance(frame, DegenerateFrame):
        a = float(frame.xi_x) ** 2
        if a <= 0:
            raise ValueError("saddle contributes at higher order")
        return PrefactorData(a, 1, 2)
    raise ValueError("saddle contributes at higher order")


@dataclass
class SaddleWKB:
    """Everything the Eyring-Kramers assembly needs from one saddle."""

    s: list
    ell: MonomialSeries
    prefactor: PrefactorData
    f_hessian: np.ndarray
    verdict: HessianVerdict
    frame: object


def analyze_saddle(sys: CoefficientSystem, s, caps: Caps | None = None, precision: int | None = None) -> SaddleWKB:
    """Route to the non-degenerate or the degenerate construction and run the checks."""
    caps = caps or Caps()
    try:
        frame = build_lambda(sys, s, caps, precision)
        ell0 = solve_eikonal_s1(frame, caps)
        ell = solve_transport_s1(frame, ell0, caps)
    except NoLinearPartError:
        ell, frame = solve_situation2(sys, s, caps, precision)
    sf = [float(c) for c in frame.s]
    fh = f_hessian(sys, sf)
    verdict = hessian_identity_check(ell, fh)
    pre = extract_a_b(ell, frame, sys)
    return SaddleWKB(sf, ell.to_float(), pre, fh, verdict, frame)


def residual_on_sphere(frame_or_loc, ell: MonomialSeries, r: float, h: float, n_dirs: int = 32,
                       K: int | None = None, seed: int = 0) -> float:
    """max |w(X, h)| over sample points with |X| = r, evaluated in the working precision.

    The residual polynomial is formed untruncated (up to the degree of the
    data) so its low-order coefficients are the ones the solver cancelled.
    """
    loc = frame_or_loc.expansion if hasattr(frame_or_loc, "expansion") else frame_or_loc
    nm = loc.nm
    Kfull = K if K is not None else 3 * loc.K + 2
    w = loc.residual(ell.poly, Kfull, 3 * loc.J + 2)
    n_s = loc.d + loc.dv
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dirs, n_s))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    best = 0.0
    for dvec in dirs:
        pt = [nm.num(float(r)) * nm.num(float(c)) for c in dvec] + [nm.num(float(h))]
        val = abs(w.evaluate_exact(pt))
        best = max(best, float(val))
    return best
