"""Sparse multivariate polynomials with exact differentiation.

Coefficients are plain Python numbers; floats are the default but any type
closed under + and * (for instance ``mpmath.mpf``) works, which the WKB
solver uses for high precision residual checks.
"""

from __future__ import annotations

from itertools import product
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np


def _add_exp(a: tuple, b: tuple) -> tuple:
    return tuple(i + j for i, j in zip(a, b))


def monomials(nvars: int, degree: int, over: Sequence[int] | None = None) -> list[tuple]:
    """Exponent tuples of total degree ``degree`` in the variables ``over``.

    Variables outside ``over`` get exponent 0. Ordering is lexicographic
    descending, which keeps assembled linear systems reproducible.
    """
    over = list(range(nvars)) if over is None else list(over)
    out = []

    def rec(pos, left, cur):
        if pos == len(over) - 1:
            cur[over[pos]] = left
            out.append(tuple(cur))
            cur[over[pos]] = 0
            return
        for k in range(left, -1, -1):
            cur[over[pos]] = k
            rec(pos + 1, left - k, cur)
        cur[over[pos]] = 0

    if not over:
        return [tuple([0] * nvars)] if degree == 0 else []
    rec(0, degree, [0] * nvars)
    return out


class Poly:
    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[tuple, object] | None = None):
        self.nvars = int(nvars)
        clean = {}
        if terms:
            for e, c in terms.items():
                e = tuple(int(k) for k in e)
                if len(e) != self.nvars:
                    raise ValueError(f"exponent {e} has wrong length for {self.nvars} variables")
                if any(k < 0 for k in e):
                    raise ValueError(f"negative exponent {e}")
                if isinstance(c, np.generic):
                    c = c.item()
                if c != 0:
                    clean[e] = clean.get(e, 0) + c
            clean = {e: c for e, c in clean.items() if c != 0}
        self.terms = clean

    # constructors
    @classmethod
    def zero(cls, nvars: int) -> "Poly":
        return cls(nvars)

    @classmethod
    def const(cls, nvars: int, c) -> "Poly":
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def var(cls, nvars: int, i: int, c=1.0) -> "Poly":
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): c})

    @classmethod
    def monomial(cls, exponent: Sequence[int], c=1.0) -> "Poly":
        return cls(len(exponent), {tuple(exponent): c})

    @classmethod
    def linear(cls, coeffs: Sequence, offset: int = 0, nvars: int | None = None) -> "Poly":
        """Sum_k coeffs[k] * x_{offset+k}."""
        n = nvars if nvars is not None else offset + len(coeffs)
        out = {}
        for k, c in enumerate(coeffs):
            if c != 0:
                e = [0] * n
                e[offset + k] = 1
                out[tuple(e)] = c
        return cls(n, out)

    # basic protocol
    def copy(self) -> "Poly":
        p = Poly(self.nvars)
        p.terms = dict(self.terms)
        return p

    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __eq__(self, other) -> bool:
        if isinstance(other, Poly):
            return self.nvars == other.nvars and self.terms == other.terms
        if isinstance(other, (int, float)):
            return self == Poly.const(self.nvars, other)
        return NotImplemented

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))

    def __repr__(self) -> str:
        if not self.terms:
            return f"Poly({self.nvars}, 0)"
        parts = [f"{c!r}*{e}" for e, c in sorted(self.terms.items(), reverse=True)]
        return f"Poly({self.nvars}, " + " + ".join(parts) + ")"

    def _check(self, other: "Poly") -> None:
        if other.nvars != self.nvars:
            raise ValueError(f"variable count mismatch: {self.nvars} vs {other.nvars}")

    def _coerce(self, other) -> "Poly":
        if isinstance(other, Poly):
            self._check(other)
            return other
        return Poly.const(self.nvars, other)

    # arithmetic
    def __add__(self, other) -> "Poly":
        other = self._coerce(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            s = out.get(e, 0) + c
            if s == 0:
                out.pop(e, None)
            else:
                out[e] = s
        p = Poly(self.nvars)
        p.terms = out
        return p

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        p = Poly(self.nvars)
        p.terms = {e: -c for e, c in self.terms.items()}
        return p

    def __sub__(self, other) -> "Poly":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Poly":
        return self._coerce(other) - self

    def scale(self, c) -> "Poly":
        if isinstance(c, np.generic):
            c = c.item()
        if c == 0:
            return Poly(self.nvars)
        p = Poly(self.nvars)
        p.terms = {e: v * c for e, v in self.terms.items() if v * c != 0}
        return p

    def mul(self, other: "Poly", max_degree: int | None = None,
            over: Sequence[int] | None = None) -> "Poly":
        """Product, optionally dropping terms whose degree in ``over`` exceeds ``max_degree``."""
        self._check(other)
        idx = list(range(self.nvars)) if over is None else list(over)
        out: dict = {}
        if max_degree is None:
            for e1, c1 in self.terms.items():
                for e2, c2 in other.terms.items():
                    e = _add_exp(e1, e2)
                    out[e] = out.get(e, 0) + c1 * c2
        else:
            d2 = [(e2, c2, sum(e2[i] for i in idx)) for e2, c2 in other.terms.items()]
            for e1, c1 in self.terms.items():
                k1 = sum(e1[i] for i in idx)
                if k1 > max_degree:
                    continue
                for e2, c2, k2 in d2:
                    if k1 + k2 <= max_degree:
                        e = _add_exp(e1, e2)
                        out[e] = out.get(e, 0) + c1 * c2
        p = Poly(self.nvars)
        p.terms = {e: c for e, c in out.items() if c != 0}
        return p

    def __mul__(self, other) -> "Poly":
        if isinstance(other, Poly):
            return self.mul(other)
        return self.scale(other)

    def __rmul__(self, other) -> "Poly":
        return self.scale(other)

    def __truediv__(self, c) -> "Poly":
        return self.scale(1 / c)

    def __pow__(self, k: int) -> "Poly":
        return self.power(k)

    def power(self, k: int, max_degree: int | None = None,
              over: Sequence[int] | None = None) -> "Poly":
        if k < 0:
            raise ValueError("negative power")
        out = Poly.const(self.nvars, 1)
        base = self
        while k:
            if k & 1:
                out = out.mul(base, max_degree, over)
            k >>= 1
            if k:
                base = base.mul(base, max_degree, over)
        return out

    # calculus
    def deriv(self, i: int, order: int = 1) -> "Poly":
        out = {}
        for e, c in self.terms.items():
            k = e[i]
            if k < order:
                continue
            f = 1
            for j in range(order):
                f *= k - j
            ne = list(e)
            ne[i] = k - order
            out[tuple(ne)] = c * f
        p = Poly(self.nvars)
        p.terms = {e: c for e, c in out.items() if c != 0}
        return p

    def partial(self, gamma: Sequence[int]) -> "Poly":
        """Mixed partial derivative with multi-index ``gamma`` over the leading variables."""
        p = self
        for i, k in enumerate(gamma):
            if k:
                p = p.deriv(i, k)
        return p

    def gradient(self, idx: Iterable[int] | None = None) -> list["Poly"]:
        idx = range(self.nvars) if idx is None else idx
        return [self.deriv(i) for i in idx]

    # structure
    def degree(self, over: Sequence[int] | None = None) -> int:
        """Total degree in ``over`` (all variables by default); -1 for the zero polynomial."""
        if not self.terms:
            return -1
        idx = range(self.nvars) if over is None else over
        return max(sum(e[i] for i in idx) for e in self.terms)

    def min_degree(self, over: Sequence[int] | None = None) -> int:
        if not self.terms:
            return -1
        idx = range(self.nvars) if over is None else over
        return min(sum(e[i] for i in idx) for e in self.terms)

    def truncate(self, max_degree: int, over: Sequence[int] | None = None) -> "Poly":
        idx = range(self.nvars) if over is None else list(over)
        p = Poly(self.nvars)
        p.terms = {e: c for e, c in self.terms.items() if sum(e[i] for i in idx) <= max_degree}
        return p

    def homogeneous(self, k: int, over: Sequence[int] | None = None) -> "Poly":
        idx = range(self.nvars) if over is None else list(over)
        p = Poly(self.nvars)
        p.terms = {e: c for e, c in self.terms.items() if sum(e[i] for i in idx) == k}
        return p

    def select(self, predicate) -> "Poly":
        p = Poly(self.nvars)
        p.terms = {e: c for e, c in self.terms.items() if predicate(e)}
        return p

    def coefficient(self, exponent: Sequence[int]):
        return self.terms.get(tuple(exponent), 0)

    def map_coeffs(self, fn) -> "Poly":
        p = Poly(self.nvars)
        p.terms = {e: fn(c) for e, c in self.terms.items()}
        p.terms = {e: c for e, c in p.terms.items() if c != 0}
        return p

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def embed(self, nvars: int, mapping: Sequence[int]) -> "Poly":
        """Move variable i to position mapping[i] in a polynomial of ``nvars`` variables."""
        out = {}
        for e, c in self.terms.items():
            ne = [0] * nvars
            for i, k in enumerate(e):
                if k:
                    ne[mapping[i]] += k
            ne = tuple(ne)
            out[ne] = out.get(ne, 0) + c
        return Poly(nvars, out)

    def substitute(self, values: Mapping[int, object]) -> "Poly":
        """Plug numbers into some variables; those variables keep exponent 0."""
        out = {}
        for e, c in self.terms.items():
            ne = list(e)
            f = c
            for i, val in values.items():
                if e[i]:
                    f = f * val ** e[i]
                    ne[i] = 0
            ne = tuple(ne)
            out[ne] = out.get(ne, 0) + f
        return Poly(self.nvars, out)

    def shift(self, center: Sequence) -> "Poly":
        """Re-expand around ``center``: returns q with q(y) = p(center + y)."""
        if all(c == 0 for c in center):
            return self.copy()
        out: dict = {}
        for e, c in self.terms.items():
            ranges = [range(k + 1) for k in e]
            for sub in product(*ranges):
                f = c
                for i, (k, j) in enumerate(zip(e, sub)):
                    if k:
                        f = f * comb(k, j) * center[i] ** (k - j) if k - j else f * comb(k, j)
                out[sub] = out.get(sub, 0) + f
        return Poly(self.nvars, out)

    def compose(self, subs: Sequence["Poly"], max_degree: int | None = None,
                over: Sequence[int] | None = None) -> "Poly":
        """Substitute variable i by the polynomial subs[i] (all subs share one variable count)."""
        n = subs[0].nvars
        out = Poly(n)
        cache: dict = {}
        for e, c in self.terms.items():
            term = Poly.const(n, c)
            for i, k in enumerate(e):
                if k:
                    key = (i, k)
                    if key not in cache:
                        cache[key] = subs[i].power(k, max_degree, over)
                    term = term.mul(cache[key], max_degree, over)
            out = out + term
        return out

    # evaluation
    def __call__(self, *args):
        if len(args) == 1 and np.ndim(args[0]) >= 1 and self.nvars != 1:
            pts = np.asarray(args[0], dtype=float)
            return self.evaluate(pts)
        if len(args) != self.nvars:
            raise ValueError(f"expected {self.nvars} arguments, got {len(args)}")
        return self.evaluate(np.stack(np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args]), axis=-1))

    def evaluate(self, points) -> np.ndarray:
        """Vectorized evaluation; ``points`` has shape (..., nvars)."""
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.nvars:
            raise ValueError(f"points have {pts.shape[-1]} coordinates, expected {self.nvars}")
        shape = pts.shape[:-1]
        out = np.zeros(shape)
        if not self.terms:
            return out
        maxdeg = [max(e[i] for e in self.terms) for i in range(self.nvars)]
        powers = []
        for i in range(self.nvars):
            col = pts[..., i]
            pw = [np.ones(shape)]
            for _ in range(maxdeg[i]):
                pw.append(pw[-1] * col)
            powers.append(pw)
        for e, c in sorted(self.terms.items()):
            term = np.full(shape, float(c))
            for i, k in enumerate(e):
                if k:
                    term = term * powers[i][k]
            out = out + term
        return out

    def evaluate_exact(self, point: Sequence):
        """Scalar evaluation keeping the coefficient type (e.g. mpmath)."""
        total = 0
        for e, c in self.terms.items():
            t = c
            for i, k in enumerate(e):
                if k:
                    t = t * point[i] ** k
            total = total + t
        return total
