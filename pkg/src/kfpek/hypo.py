"""Gaussian velocity averages: the matrix G, its bounds g1/g2 and the gap function g(h)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .model import CoefficientSystem, Field, box_samples
from .poly import Poly

MAX_MOMENT_DEGREE = 8


def normalization_constant(Sigma) -> float:
    """C_Sigma = (pi/2) det(Sigma^-1)^(2/d') so that rho has unit L2 norm."""
    S = np.array(Sigma, dtype=float, ndmin=2)
    dv = S.shape[0]
    return float(np.pi / 2 * abs(np.linalg.det(np.linalg.inv(S))) ** (2 / dv))


def rho(Sigma, h: float, v) -> np.ndarray:
    """(C_Sigma h)^(-d'/4) exp(-|Sigma v|^2 / h)."""
    S = np.array(Sigma, dtype=float, ndmin=2)
    dv = S.shape[0]
    v = np.asarray(v, dtype=float)
    sv = v @ S.T
    return (normalization_constant(S) * h) ** (-dv / 4) * np.exp(-np.sum(sv * sv, axis=-1) / h)


def velocity_covariance(SS, h: float = 1.0) -> np.ndarray:
    """Covariance of the probability density rho^2, i.e. (h/4) (Sigma^T Sigma)^-1."""
    return 0.25 * h * np.linalg.inv(np.array(SS, dtype=float, ndmin=2))


@lru_cache(maxsize=4096)
def _unit_moment(cov_key: tuple, dv: int, gamma: tuple) -> float:
    # Stein recursion: E[v_i g(v)] = sum_j C_ij E[d_j g(v)]
    if sum(gamma) == 0:
        return 1.0
    if sum(gamma) % 2:
        return 0.0
    C = np.array(cov_key).reshape(dv, dv)
    i = next(k for k, g in enumerate(gamma) if g)
    rest = list(gamma)
    rest[i] -= 1
    total = 0.0
    for j in range(dv):
        if rest[j] and C[i, j] != 0:
            low = list(rest)
            low[j] -= 1
            total += C[i, j] * rest[j] * _unit_moment(cov_key, dv, tuple(low))
    return total


def moment_from_SS(SS, h: float, gamma: Sequence[int]) -> float:
    """Exact moment of v^gamma under rho^2, given Sigma^T Sigma."""
    SS = np.array(SS, dtype=float, ndmin=2)
    gamma = tuple(int(g) for g in gamma)
    if len(gamma) != SS.shape[0]:
        raise ValueError("multi-index length must equal d'")
    k = sum(gamma)
    if k > MAX_MOMENT_DEGREE:
        raise ValueError(f"moment degree {k} exceeds the cap {MAX_MOMENT_DEGREE}")
    C = velocity_covariance(SS, 1.0)
    return _unit_moment(tuple(C.ravel().tolist()), SS.shape[0], gamma) * h ** (k / 2)


def gaussian_moment(Sigma, h: float, gamma: Sequence[int]) -> float:
    """Integral of v^gamma rho(v)^2 over velocity space."""
    S = np.array(Sigma, dtype=float, ndmin=2)
    return moment_from_SS(S.T @ S, h, gamma)


def integrate_velocity(p: Poly, SS, d: int, dv: int, h_symbolic: bool = True) -> Poly:
    """<p rho, rho> in v for p in the (x, v, h) layout.

    The result is a Poly in (x, h) (d + 1 variables): each v^b contributes its
    unit-h moment times h^(|b|/2), so dependence on h stays exact.
    """
    SS = np.array(SS, dtype=float, ndmin=2)
    out: dict = {}
    for e, c in p.terms.items():
        b = e[d:d + dv]
        k = sum(b)
        if k % 2:
            continue
        m = moment_from_SS(SS, 1.0, b)
        if m == 0:
            continue
        key = tuple(e[:d]) + (e[d + dv] + k // 2,)
        out[key] = out.get(key, 0.0) + c * m
    return Poly(d + 1, out)


def _eval_xh(p: Poly, x, h) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    hb = np.broadcast_to(np.asarray(h, dtype=float), x.shape[:-1])[..., None]
    return p.evaluate(np.concatenate([x, hb], axis=-1))


@dataclass
class GMatrixField:
    """Symmetric d x d matrix of polynomials in (x, h)."""

    entries: list
    d: int

    def evaluate(self, x, h) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        out = np.empty(x.shape[:-1] + (self.d, self.d))
        for i in range(self.d):
            for j in range(self.d):
                out[..., i, j] = _eval_xh(self.entries[i][j], x, h)
        return out

    def d_x(self, i: int) -> "GMatrixField":
        return GMatrixField([[p.deriv(i) for p in row] for row in self.entries], self.d)

    def is_symmetric(self) -> bool:
        return all(self.entries[i][j] == self.entries[j][i] for i in range(self.d) for j in range(self.d))


@dataclass
class GResult:
    G: GMatrixField
    fourth: list  # fourth[i][j] = <alpha_i^2 alpha_j^2 rho, rho> as Poly in (x, h)

    def fourth_values(self, x, h) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = self.G.d
        out = np.empty(x.shape[:-1] + (d, d))
        for i in range(d):
            for j in range(d):
                out[..., i, j] = _eval_xh(self.fourth[i][j], x, h)
        return out


def compute_G(sys: CoefficientSystem, h: float | None = None) -> GResult:
    """G = <alpha alpha^T rho, rho> and the fourth moments, exact in (x, h).

    ``h`` is accepted for interface symmetry; the result is symbolic in h.
    """
    d, dv = sys.d, sys.dv
    alpha = [a.as_poly() for a in sys.alpha]
    ent = [[None] * d for _ in range(d)]
    four = [[None] * d for _ in range(d)]
    sq = [a * a for a in alpha]
    for i in range(d):
        for j in range(i, d):
            ent[i][j] = ent[j][i] = integrate_velocity(alpha[i] * alpha[j], sys.SS, d, dv)
            four[i][j] = four[j][i] = integrate_velocity(sq[i] * sq[j], sys.SS, d, dv)
    return GResult(GMatrixField(ent, d), four)


# ---------------------------------------------------------------------------
# bounds and the gap function


@dataclass(frozen=True)
class Monomial:
    c: float
    p: float

    def __call__(self, h):
        return self.c * np.asarray(h, dtype=float) ** self.p

    def to_dict(self) -> dict:
        return {"c": self.c, "p": self.p}


def fit_monomial(hs: Sequence[float], values: Sequence[float], quantum: float = 0.25) -> Monomial:
    """Least squares fit of log(value) against log(h); exponent rounded to ``quantum``."""
    lh = np.log(np.asarray(hs, dtype=float))
    lv = np.log(np.asarray(values, dtype=float))
    slope = np.polyfit(lh, lv, 1)[0] if len(lh) > 1 else 1.0
    p = round(slope / quantum) * quantum
    c = float(np.exp(np.mean(lv - p * lh)))
    return Monomial(c, float(p))


def bounded_as_h_decreases(hs: Sequence[float], values: Sequence[float], tol: float = 0.25) -> bool:
    """True when values(h) do not blow up as h decreases (fitted log-log slope >= -tol)."""
    vals = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(vals)):
        return False
    if np.all(vals < 1e-12):
        return True
    if np.any(vals <= 0) or len(vals) < 2:
        return bool(np.all(vals > 0))
    slope = np.polyfit(np.log(np.asarray(hs, dtype=float)), np.log(vals), 1)[0]
    return bool(slope >= -tol)


class AssumptionFailure(ValueError):
    def __init__(self, message: str, witness: dict):
        super().__init__(f"{message}: {witness}")
        self.witness = witness


@dataclass
class BoundsResult:
    g1: Monomial
    g2: Monomial
    h_grid: list
    g1_samples: list
    g2_samples: list
    derivative_constant: float
    derivative_constants_by_h: list
    fourth_ratio_by_h: list
    verdicts: dict
    witnesses: dict


def bound_g1_g2(Gres: GResult | GMatrixField, box: Sequence, h_grid: Sequence[float] = (0.02, 0.05, 0.1, 0.2),
                n_per_axis: int = 16, psd_tol: float = 1e-14) -> BoundsResult:
    """Eigenvalue extremes of G over box samples, fitted as monomials in h, plus (G) ii/iii tests."""
    G = Gres.G if isinstance(Gres, GResult) else Gres
    fourth = Gres if isinstance(Gres, GResult) else None
    pts = box_samples(box, n_per_axis)
    lo, hi, dcons, fratios = [], [], [], []
    witnesses: dict = {}
    for h in h_grid:
        M = G.evaluate(pts, h)
        w = np.linalg.eigvalsh(M)
        if np.any(w[:, 0] < -psd_tol * max(1.0, np.abs(w).max())):
            k = int(np.argmin(w[:, 0]))
            raise AssumptionFailure("G is not positive semidefinite", {"x": pts[k].tolist(), "h": h,
                                                                      "eigenvalue": float(w[k, 0])})
        lo.append(float(w[:, 0].min()))
        hi.append(float(w[:, -1].max()))
        # generalized eigenvalues of (d_i G, G)
        cmax = 0.0
        Linv = np.linalg.inv(np.linalg.cholesky(M))
        for i in range(G.d):
            D = G.d_x(i).evaluate(pts, h)
            ge = np.linalg.eigvalsh(Linv @ D @ np.swapaxes(Linv, -1, -2))
            k = int(np.argmax(np.abs(ge).max(axis=-1)))
            val = float(np.abs(ge[k]).max())
            if val > cmax:
                cmax = val
                witnesses["derivative"] = {"x": pts[k].tolist(), "h": h, "axis": i, "constant": val}
        dcons.append(cmax)
        if fourth is not None:
            F = fourth.fourth_values(pts, h)
            fratios.append(float(F.max() / hi[-1] ** 2))
    g1 = fit_monomial(h_grid, lo)
    g2 = fit_monomial(h_grid, hi)
    verdicts = {
        "G_i": bool(min(lo) > 0),
        "G_ii": bounded_as_h_decreases(h_grid, dcons),
    }
    if fratios:
        verdicts["G_iii"] = bounded_as_h_decreases(h_grid, fratios)
        verdicts["G_iii_literal"] = bool(max(fratios) <= 1.0)
    return BoundsResult(g1, g2, list(map(float, h_grid)), lo, hi, float(max(dcons)), dcons, fratios,
                        verdicts, witnesses)


def gap_function(g1, g2, nu_bar: int, h):
    """h / (1 + h^(4/nu - 2) (g2/g1)^3 + h^(1/nu) g1^(-1/2)); g1, g2 numbers or callables of h."""
    h = np.asarray(h, dtype=float)
    a = g1(h) if callable(g1) else np.asarray(g1, dtype=float)
    b = g2(h) if callable(g2) else np.asarray(g2, dtype=float)
    out = h / (1 + h ** (4 / nu_bar - 2) * (b / a) ** 3 + h ** (1 / nu_bar) * a ** -0.5)
    return float(out) if out.ndim == 0 else out


def polynomial_lower_bound(g1, g2, nu_bar: int, h_grid: Sequence[float]) -> dict:
    """Fit g(h) ~ C h^c over ``h_grid``; g no worse than polynomial means a finite c >= 1."""
    hs = np.asarray(h_grid, dtype=float)
    gs = np.array([gap_function(g1, g2, nu_bar, h) for h in hs])
    c = float(np.polyfit(np.log(hs), np.log(gs), 1)[0]) if len(hs) > 1 else 1.0
    return {"exponent": c, "passed": bool(np.all(gs > 0) and np.isfinite(c) and c >= 1 - 1e-9),
            "values": gs.tolist()}


@dataclass
class CenteringVerdict:
    passed: bool
    values: np.ndarray
    max_abs: float
    witness: dict | None


def _alpha_at(sys: CoefficientSystem, i: int, x, h) -> Poly:
    return sys.alpha[i].at_x(sys.V, x, h)


def check_centering(sys: CoefficientSystem, h: float, x_samples) -> CenteringVerdict:
    """Velocity average of every alpha_i against rho^2 at the sample points (must vanish)."""
    xs = np.asarray(x_samples, dtype=float).reshape(-1, sys.d)
    vals = np.zeros((len(xs), sys.d))
    for i, a in enumerate(sys.alpha):
        if not a.has_potential_factors():
            avg = integrate_velocity(a.as_poly(), sys.SS, sys.d, sys.dv)
            vals[:, i] = _eval_xh(avg, xs, h)
        else:
            for k, x in enumerate(xs):
                avg = integrate_velocity(_alpha_at(sys, i, x, None), sys.SS, sys.d, sys.dv)
                vals[k, i] = _eval_xh(avg, x[None], h)[0]
    mx = float(np.abs(vals).max()) if vals.size else 0.0
    witness = None
    if mx != 0:
        k, i = np.unravel_index(int(np.argmax(np.abs(vals))), vals.shape)
        witness = {"x": xs[k].tolist(), "component": int(i), "value": float(vals[k, i])}
    return CenteringVerdict(mx == 0.0, vals, mx, witness)


def hypocoercivity_fields(sys: CoefficientSystem) -> dict:
    """The four vector fields q of the hypocoercivity condition (each a list of d Fields)."""
    d, dv = sys.d, sys.dv
    n = sys.nvars
    hp = Poly.var(n, n - 1)
    SSv = [Field.poly(d, dv, p) for p in sys.SSv()]
    out = {"hJx_alpha_alpha": [], "hJv_alpha_beta": [], "hJv_alpha_SSv": [], "h2_lap_alpha": []}
    for a in sys.alpha:
        q1 = Field(d, dv)
        for k in range(d):
            q1 = q1 + a.d_x(k) * sys.alpha[k]
        q2 = Field(d, dv)
        q3 = Field(d, dv)
        lap = Field(d, dv)
        for k in range(dv):
            dak = a.d_v(k)
            q2 = q2 + dak * sys.beta[k]
            q3 = q3 + dak * SSv[k]
            lap = lap + dak.d_v(k)
        out["hJx_alpha_alpha"].append(q1.scale(hp))
        out["hJv_alpha_beta"].append(q2.scale(hp))
        out["hJv_alpha_SSv"].append(q3.scale(hp))
        out["h2_lap_alpha"].append(lap.scale(hp * hp))
    return out


def hypocoercivity_constant(sys: CoefficientSystem, g2: Callable, x_samples, h_grid: Sequence[float]) -> dict:
    """Smallest c with <q q^T rho, rho> <= c g2^2 (|grad V|^2 + h) at the samples, per field and h."""
    xs = np.asarray(x_samples, dtype=float).reshape(-1, sys.d)
    fields = hypocoercivity_fields(sys)
    res: dict = {}
    for name, q in fields.items():
        per_h = []
        for h in h_grid:
            cmax = 0.0
            for x in xs:
                qp = [f.at_x(sys.V, x, h) for f in q]
                Q = np.empty((sys.d, sys.d))
                for i in range(sys.d):
                    for j in range(i, sys.d):
                        avg = integrate_velocity(qp[i] * qp[j], sys.SS, sys.d, sys.dv)
                        Q[i, j] = Q[j, i] = _eval_xh(avg, x[None], 0.0)[0]
                top = float(np.linalg.eigvalsh(Q)[-1])
                gv = float(np.sum(sys.V.grad(x[None])[0] ** 2))
                cmax = max(cmax, top / (g2(h) ** 2 * (gv + h)))
            per_h.append(cmax)
        res[name] = per_h
    return res


@dataclass
class HypoReport:
    g1: Monomial
    g2: Monomial
    nu_bar: int
    h_grid: list
    verdicts: dict
    witnesses: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def g_of_h(self, h):
        return gap_function(self.g1, self.g2, self.nu_bar, h)

    def to_json(self) -> str:
        return json.dumps({
            "g1": self.g1.to_dict(), "g2": self.g2.to_dict(), "nu_bar": self.nu_bar,
            "h_grid": self.h_grid, "verdicts": self.verdicts, "witnesses": self.witnesses,
            "details": self.details}, indent=2, sort_keys=True, default=float)

    def g_csv(self, h_grid: Sequence[float] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "g1", "g2", "g"])
        for h in (h_grid or self.h_grid):
            w.writerow([repr(float(h)), repr(float(self.g1(h))), repr(float(self.g2(h))), repr(self.g_of_h(h))])
        return buf.getvalue()


def hypo_report(sys: CoefficientSystem, box: Sequence, h_grid: Sequence[float] = (0.02, 0.05, 0.1, 0.2),
                nu_bar: int = 2, n_per_axis: int = 16, hypo_samples: int = 5) -> HypoReport:
    """All assumption verdicts for a coefficient system over a sampled x box."""
    Gres = compute_G(sys)
    b = bound_g1_g2(Gres, box, h_grid, n_per_axis)
    pts = box_samples(box, n_per_axis)
    cen = check_centering(sys, h_grid[0], pts)
    xs = box_samples(box, hypo_samples)
    hc = hypocoercivity_constant(sys, b.g2, xs, h_grid)
    # bounded across h means the ratio does not blow up as h decreases
    hyp_ok = all(bounded_as_h_decreases(h_grid, v) for v in hc.values())
    poly = polynomial_lower_bound(b.g1, b.g2, nu_bar, h_grid)
    verdicts = dict(b.verdicts)
    verdicts["hypocoer_i"] = cen.passed
    verdicts["hypocoer_ii"] = bool(hyp_ok)
    verdicts["g_polynomial"] = poly["passed"]
    witnesses = dict(b.witnesses)
    if cen.witness:
        witnesses["centering"] = cen.witness
    details = {"g1_samples": b.g1_samples, "g2_samples": b.g2_samples,
               "derivative_constants": b.derivative_constants_by_h,
               "fourth_moment_ratios": b.fourth_ratio_by_h, "hypocoer_constants": hc,
               "g_exponent": poly["exponent"], "box": [list(map(float, x)) for x in box]}
    return HypoReport(b.g1, b.g2, nu_bar, list(map(float, h_grid)), verdicts, witnesses, details)
