"""Potentials, kinetic coefficient systems and their structural checks.

Variables of a coefficient polynomial are laid out as (x_1..x_d, v_1..v_d', h).
Coefficients may also carry factors that are partial derivatives of the
potential, so non-polynomial tails and exact cancellations both survive.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Mapping, Sequence

import numpy as np

from .poly import Poly

# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class QuadraticTail:
    """Confining term kappa * s^5/(1+s)^4 with s = |x_axes|^2 - radius^2 (zero for s <= 0).

    It is C^4 across the sphere and grows like kappa*|x|^2 at infinity.
    """

    kappa: float
    radius: float
    axes: tuple = (0,)

    def _s(self, x):
        xa = np.asarray(x, dtype=float)[..., list(self.axes)]
        return np.sum(xa * xa, axis=-1) - self.radius ** 2, xa

    @staticmethod
    def _phi(s):
        sp = np.maximum(s, 0.0)
        return sp ** 5 / (1 + sp) ** 4

    @staticmethod
    def _dphi(s):
        sp = np.maximum(s, 0.0)
        return sp ** 4 * (5 + sp) / (1 + sp) ** 5

    @staticmethod
    def _d2phi(s):
        sp = np.maximum(s, 0.0)
        return 20 * sp ** 3 / (1 + sp) ** 6

    def value(self, x):
        s, _ = self._s(x)
        return self.kappa * self._phi(s)

    def grad(self, x, d):
        s, xa = self._s(x)
        g = np.zeros(np.shape(x)[:-1] + (d,))
        g[..., list(self.axes)] = (self.kappa * 2 * self._dphi(s))[..., None] * xa
        return g

    def hessian(self, x, d):
        s, xa = self._s(x)
        H = np.zeros(np.shape(x)[:-1] + (d, d))
        ax = list(self.axes)
        sub = (4 * self._d2phi(s))[..., None, None] * xa[..., :, None] * xa[..., None, :]
        sub = sub + (2 * self._dphi(s))[..., None, None] * np.eye(len(ax))
        for a, i in enumerate(ax):
            for b, j in enumerate(ax):
                H[..., i, j] = self.kappa * sub[..., a, b]
        return H

    def taylor(self, center, order: int, d: int) -> Poly:
        """Taylor polynomial at ``center`` in shifted coordinates, to total degree ``order``."""
        c = np.asarray(center, dtype=float)
        s0 = float(np.sum(c[list(self.axes)] ** 2) - self.radius ** 2)
        if s0 <= 0:
            # the tail and its first four derivatives vanish on the closed ball
            if s0 == 0 and order > 4:
                raise ValueError("tail Taylor expansion above order 4 is undefined on the sphere")
            return Poly(d)
        # phi(s0 + t) = (s0 + t)^5 * (1 + s0 + t)^(-4) as a series in t
        num = [comb(5, k) * s0 ** (5 - k) for k in range(6)] + [0.0] * order
        den = [(-1) ** k * comb(k + 3, 3) * (1 + s0) ** (-4 - k) for k in range(order + 1)]
        ser = [sum(num[i] * den[k - i] for i in range(k + 1)) for k in range(order + 1)]
        # t = 2 c_A . y_A + |y_A|^2
        u = Poly(d)
        for i in self.axes:
            u = u + Poly.var(d, i, 2 * c[i]) + Poly.monomial([2 if j == i else 0 for j in range(d)])
        out = Poly(d)
        upow = Poly.const(d, 1.0)
        for k in range(order + 1):
            out = out + upow.scale(ser[k])
            upow = upow.mul(u, order)
        return out.truncate(order).scale(self.kappa)


@dataclass
class PotentialSpec:
    """V = polynomial (+ optional confining tail) in d variables."""

    poly: Poly
    tail: QuadraticTail | None = None
    derivative_order_cap: int = 4

    def __post_init__(self):
        if self.derivative_order_cap < 4:
            raise ValueError("derivative_order_cap must be at least 4")
        self._cache: dict = {}

    @classmethod
    def from_coefficients(cls, coeffs: Mapping, d: int | None = None, **kw) -> "PotentialSpec":
        items = {}
        for k, c in coeffs.items():
            e = (int(k),) if np.isscalar(k) else tuple(int(i) for i in k)
            items[e] = float(c)
        if d is None:
            d = len(next(iter(items)))
        return cls(Poly(d, items), **kw)

    @property
    def d(self) -> int:
        return self.poly.nvars

    def derivative_poly(self, gamma: Sequence[int]) -> Poly:
        key = tuple(gamma)
        if key not in self._cache:
            self._cache[key] = self.poly.partial(key)
        return self._cache[key]

    def _pts(self, x):
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if x.shape[-1] != self.d:
            raise ValueError(f"points have dimension {x.shape[-1]}, expected {self.d}")
        return x

    def value(self, x):
        x = self._pts(x)
        out = self.poly.evaluate(x)
        if self.tail is not None:
            out = out + self.tail.value(x)
        return out

    def grad(self, x):
        x = self._pts(x)
        g = np.stack([self.derivative_poly(_unit(self.d, i)).evaluate(x) for i in range(self.d)], axis=-1)
        if self.tail is not None:
            g = g + self.tail.grad(x, self.d)
        return g

    def hessian(self, x):
        x = self._pts(x)
        H = np.empty(x.shape[:-1] + (self.d, self.d))
        for i in range(self.d):
            for j in range(i, self.d):
                gam = [0] * self.d
                gam[i] += 1
                gam[j] += 1
                H[..., i, j] = H[..., j, i] = self.derivative_poly(gam).evaluate(x)
        if self.tail is not None:
            H = H + self.tail.hessian(x, self.d)
        return H

    def derivative(self, gamma: Sequence[int], x):
        """Partial derivative of multi-index ``gamma`` at points ``x`` (shape (..., d))."""
        x = self._pts(x)
        gamma = tuple(gamma)
        k = sum(gamma)
        out = self.derivative_poly(gamma).evaluate(x)
        if self.tail is None or k == 0:
            return out + (self.tail.value(x) if self.tail is not None else 0)
        if k == 1:
            return out + self.tail.grad(x, self.d)[..., gamma.index(1)]
        if k == 2:
            idx = [i for i, g in enumerate(gamma) for _ in range(g)]
            return out + self.tail.hessian(x, self.d)[..., idx[0], idx[1]]
        flat = x.reshape(-1, self.d)
        fact = float(np.prod([factorial(g) for g in gamma]))
        tv = np.array([self.tail.taylor(p, k, self.d).coefficient(gamma) * fact for p in flat])
        return out + tv.reshape(x.shape[:-1])

    def taylor(self, center, order: int) -> Poly:
        """Taylor polynomial of V around ``center`` in shifted coordinates."""
        p = self.poly.shift([float(c) for c in center]).truncate(order)
        if self.tail is not None:
            p = p + self.tail.taylor(center, order, self.d)
        return p

    def derivative_taylor(self, gamma: Sequence[int], center, order: int) -> Poly:
        """Taylor polynomial of the partial derivative ``gamma`` around ``center``."""
        k = sum(gamma)
        full = self.taylor(center, order + k)
        return full.partial(gamma).truncate(order)

    def __eq__(self, other):
        if not isinstance(other, PotentialSpec):
            return NotImplemented
        return self.poly == other.poly and self.tail == other.tail


def _unit(n: int, i: int) -> tuple:
    return tuple(1 if j == i else 0 for j in range(n))


# ---------------------------------------------------------------------------
# coefficient fields


class Field:
    """Sum of (product of potential derivatives) * polynomial in (x, v, h).

    ``terms`` maps a sorted tuple of x multi-indices (the factors d^gamma V,
    empty tuple meaning 1) to a Poly in d + d' + 1 variables.
    """

    __slots__ = ("d", "dv", "terms")

    def __init__(self, d: int, dv: int, terms: Mapping[tuple, Poly] | None = None):
        self.d, self.dv = d, dv
        self.terms = {}
        for k, p in (terms or {}).items():
            key = tuple(sorted(tuple(g) for g in k))
            if p.nvars != d + dv + 1:
                raise ValueError("coefficient polynomial has wrong variable count")
            cur = self.terms.get(key)
            p = p if cur is None else cur + p
            if p.is_zero():
                self.terms.pop(key, None)
            else:
                self.terms[key] = p

    @property
    def nvars(self) -> int:
        return self.d + self.dv + 1

    @classmethod
    def poly(cls, d: int, dv: int, p: Poly) -> "Field":
        return cls(d, dv, {(): p})

    @classmethod
    def potential_derivative(cls, d: int, dv: int, gamma: Sequence[int], coeff: Poly | float = 1.0) -> "Field":
        n = d + dv + 1
        p = coeff if isinstance(coeff, Poly) else Poly.const(n, coeff)
        return cls(d, dv, {(tuple(gamma),): p})

    def is_zero(self) -> bool:
        return not self.terms

    def has_potential_factors(self) -> bool:
        return any(k for k in self.terms)

    def as_poly(self) -> Poly:
        if self.has_potential_factors():
            raise ValueError("field depends on derivatives of the potential")
        return self.terms.get((), Poly(self.nvars))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Field):
            return NotImplemented
        return (self.d, self.dv) == (other.d, other.dv) and self.terms == other.terms

    def __repr__(self) -> str:
        return f"Field({self.d}, {self.dv}, {self.terms!r})"

    def __add__(self, other: "Field") -> "Field":
        out = Field(self.d, self.dv, self.terms)
        for k, p in other.terms.items():
            cur = out.terms.get(k)
            s = p if cur is None else cur + p
            if s.is_zero():
                out.terms.pop(k, None)
            else:
                out.terms[k] = s
        return out

    def __neg__(self) -> "Field":
        return Field(self.d, self.dv, {k: -p for k, p in self.terms.items()})

    def __sub__(self, other: "Field") -> "Field":
        return self + (-other)

    def scale(self, c) -> "Field":
        if isinstance(c, Poly):
            return Field(self.d, self.dv, {k: p * c for k, p in self.terms.items()})
        return Field(self.d, self.dv, {k: p.scale(c) for k, p in self.terms.items()})

    def __mul__(self, other) -> "Field":
        if not isinstance(other, Field):
            return self.scale(other)
        out = Field(self.d, self.dv)
        for k1, p1 in self.terms.items():
            for k2, p2 in other.terms.items():
                out = out + Field(self.d, self.dv, {k1 + k2: p1 * p2})
        return out

    __rmul__ = scale

    def d_x(self, i: int) -> "Field":
        out = Field(self.d, self.dv)
        for k, p in self.terms.items():
            dp = p.deriv(i)
            if not dp.is_zero():
                out = out + Field(self.d, self.dv, {k: dp})
            for n, gam in enumerate(k):
                raised = list(gam)
                raised[i] += 1
                newk = k[:n] + (tuple(raised),) + k[n + 1:]
                out = out + Field(self.d, self.dv, {newk: p})
        return out

    def d_v(self, j: int) -> "Field":
        idx = self.d + j
        return Field(self.d, self.dv, {k: p.deriv(idx) for k, p in self.terms.items()})

    def h_degree(self) -> int:
        hv = self.nvars - 1
        return max((p.degree([hv]) for p in self.terms.values()), default=-1)

    def h_part(self, j: int) -> "Field":
        """Coefficient of h^j (still expressed in the full variable layout, h exponent 0)."""
        hv = self.nvars - 1
        out = {}
        for k, p in self.terms.items():
            q = p.select(lambda e: e[hv] == j)
            q = Poly(p.nvars, {e[:hv] + (0,): c for e, c in q.terms.items()})
            if not q.is_zero():
                out[k] = q
        return Field(self.d, self.dv, out)

    def evaluate(self, V: PotentialSpec, x, v, h) -> np.ndarray:
        """Vectorized evaluation at broadcastable x (..., d), v (..., d'), scalar or array h."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], v.shape[:-1], np.shape(h))
        xb = np.broadcast_to(x, shape + (self.d,))
        vb = np.broadcast_to(v, shape + (self.dv,))
        hb = np.broadcast_to(np.asarray(h, dtype=float), shape)[..., None]
        pts = np.concatenate([xb, vb, hb], axis=-1)
        out = np.zeros(shape)
        cache: dict = {}
        for k, p in self.terms.items():
            val = p.evaluate(pts)
            for gam in k:
                if gam not in cache:
                    cache[gam] = np.broadcast_to(V.derivative(gam, xb), shape)
                val = val * cache[gam]
            out = out + val
        return out

    def at_x(self, V: PotentialSpec, x, h=None) -> Poly:
        """Freeze x (and optionally h) numerically; the result is a Poly in the same layout."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        subs = {i: float(x[i]) for i in range(self.d)}
        if h is not None:
            subs[self.nvars - 1] = float(h)
        out = Poly(self.nvars)
        for k, p in self.terms.items():
            c = 1.0
            for gam in k:
                c *= float(V.derivative(gam, x[None, :])[0])
            out = out + p.substitute(subs).scale(c)
        return out

    def taylor(self, V: PotentialSpec, center, order: int, over: Sequence[int] | None = None) -> Poly:
        """Expand around x = center; returns a Poly in shifted x with the same layout.

        ``order`` caps the total degree in the variables ``over`` (space variables by default).
        """
        n = self.nvars
        over = list(range(self.d + self.dv)) if over is None else list(over)
        shift = [float(c) for c in center] + [0.0] * (self.dv + 1)
        embed_map = list(range(self.d))
        out = Poly(n)
        for k, p in self.terms.items():
            term = p.shift(shift).truncate(order, over)
            for gam in k:
                tp = V.derivative_taylor(gam, center, order).embed(n, embed_map)
                term = term.mul(tp, order, over)
            out = out + term
        return out.truncate(order, over)


def potential_gradient_fields(d: int, dv: int) -> list[Field]:
    return [Field.potential_derivative(d, dv, _unit(d, i)) for i in range(d)]


# ---------------------------------------------------------------------------
# coefficient systems


@dataclass
class CoefficientSystem:
    """Kinetic model: dx = alpha dt, dv = (beta - 4 g S v) dt + sqrt(2 h g) dB with S = Sigma^T Sigma.

    ``diffusion`` is the optional scalar g(x) (a Poly in x); it multiplies the
    friction and the noise, and is 1 unless set.
    """

    V: PotentialSpec
    SS: np.ndarray
    alpha: list
    beta: list
    diffusion: Poly | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    extra_variables: tuple = ()

    def __post_init__(self):
        self.SS = np.array(self.SS, dtype=float, ndmin=2)
        if self.SS.shape[0] != self.SS.shape[1]:
            raise ValueError("Sigma^T Sigma must be square")
        if not np.allclose(self.SS, self.SS.T, rtol=0, atol=0):
            raise ValueError("Sigma^T Sigma must be symmetric")
        w = np.linalg.eigvalsh(self.SS)
        if w.min() <= 1e-12 * max(1.0, w.max()):
            raise ValueError("Sigma is not invertible")
        if len(self.alpha) != self.d or len(self.beta) != self.dv:
            raise ValueError("alpha must have d entries and beta d' entries")
        for fld in list(self.alpha) + list(self.beta):
            if (fld.d, fld.dv) != (self.d, self.dv):
                raise ValueError("coefficient field layout mismatch")
            if fld.h_degree() > 2:
                raise ValueError("coefficients may have degree at most 2 in h")
        if self.diffusion is not None and self.diffusion.nvars != self.d:
            raise ValueError("diffusion must be a polynomial in x")

    @property
    def d(self) -> int:
        return self.V.d

    @property
    def dv(self) -> int:
        return self.SS.shape[0]

    @property
    def nvars(self) -> int:
        return self.d + self.dv + 1

    @property
    def Sigma(self) -> np.ndarray:
        """An upper-triangular Sigma with Sigma^T Sigma = SS."""
        return np.linalg.cholesky(self.SS).T

    @property
    def det_sigma(self) -> float:
        return float(np.sqrt(np.linalg.det(self.SS)))

    def v_poly(self, j: int) -> Poly:
        return Poly.var(self.nvars, self.d + j)

    def SSv(self) -> list[Poly]:
        """Components of S v as polynomials."""
        return [Poly.linear(list(self.SS[i]), self.d, self.nvars) for i in range(self.dv)]

    def diffusion_poly(self) -> Poly:
        """g(x) embedded in the coefficient layout."""
        if self.diffusion is None:
            return Poly.const(self.nvars, 1.0)
        return self.diffusion.embed(self.nvars, list(range(self.d)))

    def divergence(self) -> Field:
        out = Field(self.d, self.dv)
        for i, a in enumerate(self.alpha):
            out = out + a.d_x(i)
        for j, b in enumerate(self.beta):
            out = out + b.d_v(j)
        return out

    def kinetic_energy_poly(self) -> Poly:
        """|Sigma v|^2 as a polynomial in the coefficient layout."""
        out = Poly(self.nvars)
        for i in range(self.dv):
            for j in range(self.dv):
                if self.SS[i, j] != 0:
                    e = [0] * self.nvars
                    e[self.d + i] += 1
                    e[self.d + j] += 1
                    out = out + Poly.monomial(e, float(self.SS[i, j]))
        return out

    def f(self, x, v):
        return eval_f(self, x, v)

    def drift(self, x, v, h):
        """Deterministic parts (dx/dt, dv/dt) of the SDE at broadcastable points."""
        ax = np.stack([a.evaluate(self.V, x, v, h) for a in self.alpha], axis=-1)
        bv = np.stack([b.evaluate(self.V, x, v, h) for b in self.beta], axis=-1)
        g = self.diffusion_values(x)
        bv = bv - 4 * g[..., None] * (np.asarray(v) @ self.SS.T)
        return ax, bv

    def diffusion_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.diffusion is None:
            return np.ones(x.shape[:-1])
        return self.diffusion.evaluate(x)

    def same_coefficients(self, other: "CoefficientSystem") -> bool:
        """Coefficient-by-coefficient equality (ignores names and parameters)."""
        return (self.V == other.V and np.array_equal(self.SS, other.SS)
                and self.alpha == other.alpha and self.beta == other.beta
                and (self.diffusion_poly() == other.diffusion_poly()))


def eval_f(sys: CoefficientSystem, x, v):
    """Total energy V(x) + |Sigma v|^2."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if sys.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if sys.dv == 1 and (v.ndim == 0 or v.shape[-1] != 1):
        v = v[..., None]
    if x.shape[-1] != sys.d or v.shape[-1] != sys.dv:
        raise ValueError(f"expected x in R^{sys.d} and v in R^{sys.dv}")
    return sys.V.value(x) + np.einsum("...i,ij,...j->...", v, sys.SS, v)


# ---------------------------------------------------------------------------
# sampling helpers


def box_samples(box: Sequence[Sequence[float]], n_per_axis: int | Sequence[int] = 64) -> np.ndarray:
    """Tensor grid of sample points over a box, shape (N, len(box))."""
    box = [tuple(map(float, b)) for b in box]
    ns = [n_per_axis] * len(box) if np.isscalar(n_per_axis) else list(n_per_axis)
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(box, ns)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class StationarityReport:
    max_residual: float
    sample_points: list
    residual_field: np.ndarray
    max_scaled_residual: float = 0.0


def stationarity_residual(sys: CoefficientSystem, h: float, grid=None, n_per_axis: int = 5,
                          box: Sequence | None = None) -> StationarityReport:
    """alpha.dV + 2 beta.S v - (h/2)(div_x alpha + div_v beta) at sample points.

    ``grid`` is an (x, v) pair of arrays; otherwise a tensor grid over ``box``
    (default [-2, 2] in every direction) is used.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if grid is None:
        box = box or [(-2.0, 2.0)] * (sys.d + sys.dv)
        pts = box_samples(box, n_per_axis)
        x, v = pts[:, :sys.d], pts[:, sys.d:]
    else:
        x, v = (np.asarray(a, dtype=float) for a in grid)
        x = x.reshape(-1, sys.d)
        v = v.reshape(-1, sys.dv)
    gradV = sys.V.grad(x)
    a = np.stack([fa.evaluate(sys.V, x, v, h) for fa in sys.alpha], axis=-1)
    b = np.stack([fb.evaluate(sys.V, x, v, h) for fb in sys.beta], axis=-1)
    div = sys.divergence().evaluate(sys.V, x, v, h)
    res = np.sum(a * gradV, axis=-1) + 2 * np.sum(b * (v @ sys.SS.T), axis=-1) - 0.5 * h * div
    fv = eval_f(sys, x, v)
    return StationarityReport(
        max_residual=float(np.max(np.abs(res))) if res.size else 0.0,
        sample_points=[(xi.tolist(), vi.tolist()) for xi, vi in zip(x, v)],
        residual_field=res,
        max_scaled_residual=float(np.max(np.abs(res) / (1 + np.abs(fv)))) if res.size else 0.0,
    )


@dataclass
class ConfinementReport:
    passed: bool
    C: float
    region: dict
    checks: dict
    witness: dict | None
    b_tightest: float


def check_confinement(V: PotentialSpec, box: Sequence, C_candidate: float,
                      inner_radius: float | None = None, n_per_axis: int = 64) -> ConfinementReport:
    """Sample the confinement conditions outside the ball of radius ``inner_radius``.

    Also reports the largest b with V(x) >= |x|/C + b on all box samples.
    """
    C = float(C_candidate)
    pts = box_samples(box, n_per_axis)
    r = np.linalg.norm(pts, axis=-1)
    if inner_radius is None:
        inner_radius = 0.5 * min(max(abs(lo), abs(hi)) for lo, hi in box)
    outer = pts[r >= inner_radius]
    vals = V.value(outer)
    gnorm = np.linalg.norm(V.grad(outer), axis=-1)
    hess = V.hessian(outer)
    hnorm = np.max(np.sum(np.abs(hess), axis=-1), axis=-1)
    checks = {
        "lower_bound": bool(np.all(vals >= -C)),
        "gradient": bool(np.all(gnorm >= 1 / C)),
        "hessian": bool(np.all(hnorm <= C)),
    }
    witness = None
    for name, bad in (("lower_bound", vals < -C), ("gradient", gnorm < 1 / C), ("hessian", hnorm > C)):
        if not checks[name]:
            k = int(np.argmax(bad))
            witness = {"condition": name, "point": outer[k].tolist(),
                       "value": float({"lower_bound": vals, "gradient": gnorm, "hessian": hnorm}[name][k])}
            break
    b = float(np.min(V.value(pts) - r / C))
    return ConfinementReport(
        passed=all(checks.values()), C=C,
        region={"box": [list(map(float, b_)) for b_ in box], "inner_radius": float(inner_radius),
                "samples_per_axis": int(n_per_axis), "exterior_samples": int(len(outer))},
        checks=checks, witness=witness, b_tightest=b)


@dataclass
class AccretivityReport:
    passed: bool
    C_min: float
    region: dict
    witness: dict | None


def check_accretivity_bound(sys: CoefficientSystem, box: Sequence, h: float = 0.1,
                            inner_radius: float | None = None, n_per_axis: int = 16) -> AccretivityReport:
    """Smallest C with |div_x alpha + div_v beta| <= C f on exterior samples of an (x, v) box."""
    pts = box_samples(box, n_per_axis)
    r = np.linalg.norm(pts, axis=-1)
    if inner_radius is None:
        inner_radius = 0.5 * min(max(abs(lo), abs(hi)) for lo, hi in box)
    shell = r >= inner_radius
    x, v = pts[shell, :sys.d], pts[shell, sys.d:]
    div = np.abs(sys.divergence().evaluate(sys.V, x, v, h))
    fv = eval_f(sys, x, v)
    region = {"box": [list(map(float, b_)) for b_ in box], "inner_radius": float(inner_radius),
              "samples_per_axis": int(n_per_axis), "h": float(h)}
    bad = (fv <= 0) & (div > 0)
    if np.any(bad):
        k = int(np.argmax(bad))
        return AccretivityReport(False, float("inf"), region,
                                 {"point": pts[shell][k].tolist(), "divergence": float(div[k]), "f": float(fv[k])})
    ratio = np.where(div > 0, div / np.where(fv > 0, fv, 1.0), 0.0)
    cmin = float(ratio.max()) if ratio.size else 0.0
    # growth test: the ratio on the outermost shell must not exceed the middle shell by much
    rr = r[shell]
    far = rr >= np.quantile(rr, 0.9) if rr.size else rr
    mid = (rr < np.quantile(rr, 0.5)) if rr.size else rr
    if np.any(far) and np.any(mid) and ratio[mid].max() > 0 and ratio[far].max() > 10 * ratio[mid].max():
        k = int(np.argmax(np.where(far, ratio, -1)))
        return AccretivityReport(False, cmin, region,
                                 {"point": pts[shell][k].tolist(), "ratio": float(ratio[k]), "reason": "growing"})
    return AccretivityReport(True, cmin, region, None)


# ---------------------------------------------------------------------------
# presets


def _as_potential(p) -> PotentialSpec:
    if isinstance(p, PotentialSpec):
        return p
    if isinstance(p, Poly):
        return PotentialSpec(p)
    if isinstance(p, Mapping):
        return PotentialSpec.from_coefficients(p)
    raise ValueError("potential must be a PotentialSpec, Poly or coefficient mapping")


def _as_SS(params: Mapping, dv: int, default: float) -> np.ndarray:
    if "SigmaTSigma" in params and "Sigma" in params:
        raise ValueError("give either Sigma or SigmaTSigma, not both")
    if "SigmaTSigma" in params:
        SS = np.array(params["SigmaTSigma"], dtype=float, ndmin=2)
    elif "Sigma" in params:
        S = np.array(params["Sigma"], dtype=float, ndmin=2)
        if abs(np.linalg.det(S)) <= 1e-12:
            raise ValueError("Sigma is not invertible")
        SS = S.T @ S
        SS = 0.5 * (SS + SS.T)
    else:
        SS = default * np.eye(dv)
    if SS.shape != (dv, dv):
        raise ValueError(f"Sigma must be {dv}x{dv}")
    return SS


def _standard_parts(V: PotentialSpec, SS: np.ndarray, d: int, dv: int):
    n = d + dv + 1
    alpha = [Field.poly(d, dv, Poly.linear(list(2 * SS[i]), d, n)) for i in range(d)]
    beta = [Field.potential_derivative(d, dv, _unit(d, j), -1.0) for j in range(dv)]
    return alpha, beta


def preset(name: str, params: Mapping | None = None) -> CoefficientSystem:
    """Build one of the named coefficient systems.

    standard   alpha = 2 S v, beta = -dV (d = d'); default S = I/2
    adaptive   x = (x', y): alpha = (2 S v, 2 (S v)^2 - (h/2) diag S),
               beta = -d_x' V - diag(d_y V) S v, potential V(x') + |y|^2/2
    rescaled   alpha = 2 g S v, beta = -g dV + (h/2) dg, diffusion g
    magnetic   standard plus beta += b(x) ^ S v (d = d' = 3)
    degenerate d = d' = 1, alpha = v^2 - h, beta = -2 v V', S = 1/4
    """
    params = dict(params or {})
    name = name.lower()
    V = _as_potential(params["potential"])
    d0 = V.d
    if name == "standard":
        SS = _as_SS(params, d0, 0.5)
        alpha, beta = _standard_parts(V, SS, d0, d0)
        return CoefficientSystem(V, SS, alpha, beta, name=name, params=params)
    if name == "magnetic":
        if d0 != 3:
            raise ValueError("the magnetic preset needs d = d' = 3")
        SS = _as_SS(params, 3, 0.5)
        alpha, beta = _standard_parts(V, SS, 3, 3)
        b = params.get("b")
        if b is not None:
            n = 7
            bp = [bi if isinstance(bi, Poly) else Poly.const(3, float(bi)) for bi in b]
            if len(bp) != 3 or any(p.nvars != 3 for p in bp):
                raise ValueError("b must have three components, polynomials in x")
            bp = [p.embed(n, [0, 1, 2]) for p in bp]
            w = [Poly.linear(list(SS[i]), 3, n) for i in range(3)]
            cross = [bp[1] * w[2] - bp[2] * w[1], bp[2] * w[0] - bp[0] * w[2], bp[0] * w[1] - bp[1] * w[0]]
            beta = [beta[j] + Field.poly(3, 3, cross[j]) for j in range(3)]
        return CoefficientSystem(V, SS, alpha, beta, name=name, params=params)
    if name == "rescaled":
        SS = _as_SS(params, d0, 0.5)
        g = params.get("g", 1.0)
        g = g if isinstance(g, Poly) else Poly.const(d0, float(g))
        if g.nvars != d0:
            raise ValueError("g must be a polynomial in x")
        box = params.get("g_box", [(-5.0, 5.0)] * d0)
        gmin = float(np.min(g.evaluate(box_samples(box, 33))))
        if gmin <= 0:
            raise ValueError(f"g is not bounded below by a positive constant (min {gmin:g} on the sampled box)")
        n = d0 + d0 + 1
        ge = g.embed(n, list(range(d0)))
        alpha = [Field.poly(d0, d0, ge * Poly.linear(list(2 * SS[i]), d0, n)) for i in range(d0)]
        beta = []
        for j in range(d0):
            bj = Field.potential_derivative(d0, d0, _unit(d0, j), -ge)
            dg = ge.deriv(j)
            if not dg.is_zero():
                bj = bj + Field.poly(d0, d0, dg * Poly.monomial([0] * (n - 1) + [1], 0.5))
            beta.append(bj)
        diffusion = None if g == Poly.const(d0, 1.0) else g
        return CoefficientSystem(V, SS, alpha, beta, diffusion=diffusion, name=name, params=params)
    if name == "adaptive":
        SSp = _as_SS(params, d0, 0.5)
        dp = d0
        d = 2 * dp
        n = d + dp + 1
        # full potential V(x') + |y|^2 / 2
        full = V.poly.embed(d, list(range(dp)))
        for i in range(dp):
            full = full + Poly.monomial([2 if j == dp + i else 0 for j in range(d)], 0.5)
        tail = V.tail
        Vh = PotentialSpec(full, tail, V.derivative_order_cap)
        w = [Poly.linear(list(SSp[i]), d, n) for i in range(dp)]
        hvar = Poly.monomial([0] * (n - 1) + [1])
        alpha = [Field.poly(d, dp, w[i].scale(2)) for i in range(dp)]
        alpha += [Field.poly(d, dp, (w[i] * w[i]).scale(2) - hvar.scale(0.5 * SSp[i, i])) for i in range(dp)]
        beta = [Field.potential_derivative(d, dp, _unit(d, j), -1.0)
                + Field.potential_derivative(d, dp, _unit(d, dp + j), -w[j]) for j in range(dp)]
        return CoefficientSystem(Vh, SSp, alpha, beta, name=name, params=params,
                                 extra_variables=tuple(range(dp, d)))
    if name == "degenerate":
        if d0 != 1:
            raise ValueError("the degenerate preset is one-dimensional")
        n = 3
        v = Poly.var(n, 1)
        hv = Poly.var(n, 2)
        alpha = [Field.poly(1, 1, v * v - hv)]
        beta = [Field.potential_derivative(1, 1, (1,), v.scale(-2.0))]
        return CoefficientSystem(V, np.array([[0.25]]), alpha, beta, name=name, params=params)
    raise ValueError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# model files

def _parse_index(key: str) -> tuple:
    return tuple(int(k) for k in key.replace(";", ",").split(",") if k.strip() != "")


def _format_index(e: Sequence[int]) -> str:
    return ",".join(str(int(k)) for k in e)


def _parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.replace("\n", ";").split(";") if r.strip()]
    return np.array([[float(t) for t in r.replace(",", " ").split()] for r in rows], dtype=float)


def _format_matrix(M: np.ndarray) -> str:
    return "; ".join(" ".join(repr(float(c)) for c in row) for row in np.atleast_2d(M))


def _poly_section(p: Poly) -> dict:
    return {_format_index(e): repr(float(c)) for e, c in sorted(p.terms.items())}


def _section_poly(sec: Mapping, nvars: int) -> Poly:
    terms = {}
    for k, val in sec.items():
        e = _parse_index(k)
        if len(e) != nvars:
            raise ValueError(f"multi-index {k!r} does not have {nvars} entries")
        terms[e] = float(val)
    return Poly(nvars, terms)


def model_to_text(name: str, params: Mapping) -> str:
    """Serialize a preset name plus parameters as a key = value model file."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    V = _as_potential(params["potential"])
    cp["model"] = {"preset": name, "d": str(V.d)}
    if "SigmaTSigma" in params:
        cp["sigma"] = {"sigma_t_sigma": _format_matrix(np.array(params["SigmaTSigma"], ndmin=2))}
    elif "Sigma" in params:
        cp["sigma"] = {"sigma": _format_matrix(np.array(params["Sigma"], ndmin=2))}
    cp["potential"] = _poly_section(V.poly)
    if V.tail is not None:
        cp["tail"] = {"kappa": repr(V.tail.kappa), "radius": repr(V.tail.radius),
                      "axes": _format_index(V.tail.axes)}
    if "g" in params:
        g = params["g"] if isinstance(params["g"], Poly) else Poly.const(V.d, float(params["g"]))
        cp["rescale.g"] = _poly_section(g)
    if params.get("b") is not None:
        for i, bi in enumerate(params["b"]):
            bp = bi if isinstance(bi, Poly) else Poly.const(3, float(bi))
            cp[f"magnetic.b{i}"] = _poly_section(bp)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def model_from_text(text: str) -> tuple[str, dict]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    name = cp["model"]["preset"].strip()
    d = int(cp["model"]["d"])
    params: dict = {}
    if cp.has_section("sigma"):
        s = cp["sigma"]
        if "sigma_t_sigma" in s:
            params["SigmaTSigma"] = _parse_matrix(s["sigma_t_sigma"])
        if "sigma" in s:
            params["Sigma"] = _parse_matrix(s["sigma"])
    poly = _section_poly(cp["potential"], d)
    tail = None
    if cp.has_section("tail"):
        t = cp["tail"]
        tail = QuadraticTail(float(t["kappa"]), float(t["radius"]), _parse_index(t.get("axes", "0")))
    params["potential"] = PotentialSpec(poly, tail)
    if cp.has_section("rescale.g"):
        params["g"] = _section_poly(cp["rescale.g"], d)
    if any(cp.has_section(f"magnetic.b{i}") for i in range(3)):
        params["b"] = [_section_poly(cp[f"magnetic.b{i}"], 3) if cp.has_section(f"magnetic.b{i}")
                       else Poly(3) for i in range(3)]
    return name, params


def load_model(path) -> CoefficientSystem:
    with open(path, encoding="utf-8") as fh:
        name, params = model_from_text(fh.read())
    return preset(name, params)
