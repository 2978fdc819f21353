"""Eyring-Kramers predictions and Gaussian quasimodes on a phase-space grid."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .landscape import FICTIVE, Labeling
from .model import CoefficientSystem, eval_f
from .spectral import GridBox, OperatorMatrix
from .wkb import Caps, SaddleWKB, analyze_saddle


class MissingSaddleData(KeyError):
    pass


@dataclass
class Rate:
    """lambda(h) = prefactor h^power exp(-2 S / h); identically zero for the global minimum."""

    S: float
    power: int
    prefactor: float

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        if not np.isfinite(self.S):
            out = np.zeros_like(h)
        else:
            out = self.prefactor * h ** self.power * np.exp(-2 * self.S / h)
        return float(out) if out.ndim == 0 else out


@dataclass
class MinimumPrediction:
    index: int
    location: list
    S: float
    mu: int | None
    v: float
    saddles: list
    lam: Rate
    is_global: bool = False


@dataclass
class EKPrediction:
    entries: list

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def non_global(self) -> list:
        return [e for e in self.entries if not e.is_global]

    def rates(self, h: float) -> list[float]:
        return [e.lam(h) for e in self.entries]

    def to_csv(self, h_list: Sequence[float]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "location", "S", "mu", "v"] + [f"lambda@{h:g}" for h in h_list])
        for e in self.entries:
            S = "inf" if e.is_global else repr(e.S)
            mu = "" if e.mu is None else e.mu
            w.writerow([e.index, ";".join(repr(float(c)) for c in e.location), S, mu, repr(e.v)]
                       + [repr(e.lam(h)) for h in h_list])
        return buf.getvalue()


def predict(labeling: Labeling, saddle_data: Mapping[int, SaddleWKB],
            f_hessians_at_minima: Mapping[int, np.ndarray]) -> EKPrediction:
    """Assemble v(m), mu(m) and lambda(m, h) for every minimum.

    ``saddle_data`` is keyed by critical-point index, ``f_hessians_at_minima`` by
    labeling record index.
    """
    entries = []
    for i, rec in enumerate(labeling.records):
        loc = rec.minimum.location.tolist()
        if rec.is_global:
            entries.append(MinimumPrediction(i, loc, math.inf, None, 0.0, [], Rate(math.inf, 0, 0.0), True))
            continue
        missing = [k for k in rec.saddles if k not in saddle_data]
        if missing:
            raise MissingSaddleData(f"minimum {i}: no saddle data for critical points {missing}")
        if i not in f_hessians_at_minima:
            raise MissingSaddleData(f"minimum {i}: no Hessian of f")
        b_min = min(saddle_data[k].prefactor.b for k in rec.saddles)
        chosen = [k for k in rec.saddles if saddle_data[k].prefactor.b == b_min]
        det_m = float(np.linalg.det(f_hessians_at_minima[i]))
        v = 0.0
        for k in chosen:
            sd = saddle_data[k]
            v += math.sqrt(det_m) / math.sqrt(abs(float(np.linalg.det(sd.f_hessian)))) * sd.prefactor.a
        v /= 2 * math.pi
        mu = 1 + b_min
        entries.append(MinimumPrediction(i, loc, float(rec.S), mu, v, chosen, Rate(float(rec.S), mu, v)))
    return EKPrediction(entries)


def f_hessian_at(sys: CoefficientSystem, x) -> np.ndarray:
    d, dv = sys.d, sys.dv
    H = np.zeros((d + dv, d + dv))
    H[:d, :d] = sys.V.hessian(np.asarray(x, dtype=float).reshape(1, d))[0]
    H[d:, d:] = 2 * sys.SS
    return H


def saddle_data_for(sys: CoefficientSystem, labeling: Labeling, caps: Caps | None = None,
                    precision: int | None = None) -> dict[int, SaddleWKB]:
    """WKB data for every saddle appearing in some j(m)."""
    out = {}
    for rec in labeling.records:
        for k in rec.saddles:
            if k == FICTIVE or k in out:
                continue
            loc = labeling.criticals[k].location
            out[k] = analyze_saddle(sys, loc, caps, precision)
    return out


def minimum_hessians(sys: CoefficientSystem, labeling: Labeling) -> dict[int, np.ndarray]:
    return {i: f_hessian_at(sys, r.minimum.location) for i, r in enumerate(labeling.records)}


def ek_pipeline(sys: CoefficientSystem, labeling: Labeling, caps: Caps | None = None) -> tuple:
    sd = saddle_data_for(sys, labeling, caps)
    return predict(labeling, sd, minimum_hessians(sys, labeling)), sd


# ---------------------------------------------------------------------------
# cutoffs


def smoothstep(t):
    """C^3 blend: 1 for t <= 0, 0 for t >= 1 (degree-7 Hermite polynomial in between)."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return 1 - t ** 4 * (35 - 84 * t + 70 * t ** 2 - 20 * t ** 3)


def zeta(r):
    """Even bump: 1 on [-1, 1], 0 outside [-2, 2]."""
    return smoothstep(np.abs(np.asarray(r, dtype=float)) - 1)


def channel_constant(tau: float, h: float, n: int = 4001) -> float:
    """C_{s,h} = int_0^inf zeta(r/tau) exp(-r^2 / 2h) dr by Simpson's rule on [0, 2 tau]."""
    from scipy.integrate import simpson

    r = np.linspace(0.0, 2 * tau, n)
    return float(simpson(zeta(r / tau) * np.exp(-r * r / (2 * h)), x=r))


def channel_profile(ell: np.ndarray, tau: float, h: float, C: float | None = None, n: int = 4001) -> np.ndarray:
    """C^{-1} int_0^ell zeta(r/tau) exp(-r^2/2h) dr, tabulated on [0, 2 tau] and interpolated."""
    from scipy.integrate import cumulative_simpson

    C = channel_constant(tau, h, n) if C is None else C
    r = np.linspace(0.0, 2 * tau, n)
    F = cumulative_simpson(zeta(r / tau) * np.exp(-r * r / (2 * h)), x=r, initial=0.0) / C
    a = np.abs(ell)
    return np.sign(ell) * np.interp(a, r, F, right=F[-1])


# ---------------------------------------------------------------------------
# quasimodes


@dataclass
class Quasimode:
    m: int
    psi: np.ndarray
    grid: GridBox
    h: float
    tau: float
    delta: float
    norm: float
    support: np.ndarray
    channels: dict = field(default_factory=dict)
    orientation: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    @property
    def phi(self) -> np.ndarray:
        return self.psi / self.norm

    def to_raster(self) -> bytes:
        return write_raster(self.psi.reshape(self.grid.shape), self.grid.spacings,
                            [r[0] for r in self.grid.ranges])


def write_raster(values: np.ndarray, spacing: Sequence[float], origin: Sequence[float]) -> bytes:
    """Header: magic, ndim, dims, spacing, origin; payload: row-major little-endian doubles."""
    a = np.ascontiguousarray(values, dtype="<f8")
    head = b"KFQM" + struct.pack("<i", a.ndim) + struct.pack(f"<{a.ndim}q", *a.shape)
    head += struct.pack(f"<{a.ndim}d", *spacing) + struct.pack(f"<{a.ndim}d", *origin)
    return head + a.tobytes()


def read_raster(data: bytes):
    if data[:4] != b"KFQM":
        raise ValueError("not a quasimode raster")
    nd = struct.unpack("<i", data[4:8])[0]
    off = 8
    dims = struct.unpack(f"<{nd}q", data[off:off + 8 * nd])
    off += 8 * nd
    spacing = struct.unpack(f"<{nd}d", data[off:off + 8 * nd])
    off += 8 * nd
    origin = struct.unpack(f"<{nd}d", data[off:off + 8 * nd])
    off += 8 * nd
    vals = np.frombuffer(data[off:], dtype="<f8").reshape(dims)
    return vals, spacing, origin


def _nearest_node(grid: GridBox, point) -> tuple:
    out = []
    for ax, c in zip(grid.axes, point):
        out.append(int(np.argmin(np.abs(ax - c))))
    return tuple(out)


def _component(mask: np.ndarray, seed: tuple) -> np.ndarray:
    if not mask[seed]:
        return np.zeros_like(mask)
    lab, _ = ndimage.label(mask)
    return lab == lab[seed]


def default_tau_delta(labeling: Labeling, saddle_data: Mapping[int, SaddleWKB], m: int,
                      h: float | None = None) -> tuple[float, float]:
    """tau = 0.2 |eta . (m - s)|; delta = 0.1 times the smallest barrier, raised to 3h.

    The chi cutoff must sit several h above the saddle value or it cuts
    through the Gaussian channel, which at moderate h needs delta ~ h.
    """
    rec = labeling.records[m]
    scales = []
    for k in rec.saddles:
        sd = saddle_data[k]
        eta = _eta(sd)
        d = len(rec.minimum.location)
        scales.append(abs(float(np.dot(eta[:d], rec.minimum.location - np.asarray(sd.s)))))
    barriers = [r.S for r in labeling.records if not r.is_global]
    delta = 0.1 * min(barriers)
    if h is not None:
        delta = max(delta, 3 * h)
    return 0.2 * min(scales), delta


def _eta(sd: SaddleWKB) -> np.ndarray:
    ell = sd.ell
    n = ell.d + ell.dv + 1
    return np.array([float(ell.poly.coefficient(tuple(1 if k == i else 0 for k in range(n))))
                     for i in range(ell.d + ell.dv)])


def build_quasimode(m: int, labeling: Labeling, saddle_data: Mapping[int, SaddleWKB], sys: CoefficientSystem,
                    tau: float, delta: float, h: float, grid: GridBox) -> Quasimode:
    """psi_m on the grid: chi_m (theta_m + 1) e^{-(f - f(m))/h}, or 2 e^{-(f - f(m))/h} globally."""
    rec = labeling.records[m]
    pts = grid.points()
    x, v = grid.split(pts)
    f = eval_f(sys, x, v)
    fm = float(rec.minimum.value)
    w = grid.cell_volume
    seed = _nearest_node(grid, list(rec.minimum.location) + [0.0] * sys.dv)
    diags = []
    if rec.is_global:
        psi = 2 * np.exp(-(f - fm) / h)
        return Quasimode(m, psi, grid, h, tau, delta, float(np.sqrt(w * np.sum(psi ** 2))),
                         np.ones(grid.size, dtype=bool))
    sigma = float(rec.sigma)
    shape = grid.shape
    level = (f < sigma + 3 * delta).reshape(shape)
    region = _component(level, seed)
    channels, profiles, orient = {}, {}, {}
    union = np.zeros(shape, dtype=bool)
    for k in rec.saddles:
        sd = saddle_data[k]
        s = np.concatenate([np.asarray(sd.s, dtype=float), np.zeros(sys.dv)])
        eta = _eta(sd)
        lin = ((pts - s) @ eta).reshape(shape)
        slab = (np.abs(lin) <= 3 * tau) & (f <= sigma + 3 * delta).reshape(shape)
        C = _component(slab, _nearest_node(grid, s))
        if not C.any():
            diags.append(f"saddle {k}: channel not resolved by the grid")
        channels[k] = C
        union |= C
        profiles[k] = (sd, s, lin)
    free = region & ~union
    plus = _component(free, seed)
    if not plus.any():
        diags.append("minimum lies inside a saddle channel; reduce tau")
    theta = -np.ones(shape)
    theta[plus] = 1.0
    Cconst = channel_constant(tau, h)
    grown = ndimage.binary_dilation(plus)
    for k, (sd, s, lin) in profiles.items():
        C = channels[k]
        touch = C & grown
        sgn = 1.0 if not touch.any() or np.mean(lin[touch]) >= 0 else -1.0
        orient[k] = sgn
        if not C.any():
            continue
        ell = sgn * sd.ell.evaluate(pts[C.ravel()] - s, h)
        theta[C] = channel_profile(ell, tau, h, Cconst)
    chi = smoothstep((f.reshape(shape) - sigma - 2 * delta) / delta) * region
    psi = (chi * (theta + 1) * np.exp(-(f.reshape(shape) - fm) / h)).ravel()
    norm = float(np.sqrt(w * np.sum(psi ** 2)))
    if norm == 0:
        raise ValueError("quasimode vanishes on the grid")
    support = psi != 0
    return Quasimode(m, psi, grid, h, tau, delta, norm, support, channels, orient, diags)


def laplace_norm(sys: CoefficientSystem, labeling: Labeling, m: int, h: float) -> float:
    """2 (h pi)^{(d+d')/4} (det Hess_m f)^{-1/4}."""
    H = f_hessian_at(sys, labeling.records[m].minimum.location)
    n = sys.d + sys.dv
    return 2 * (h * math.pi) ** (n / 4) * float(np.linalg.det(H)) ** -0.25


def gram(quasimodes: Sequence[Quasimode]) -> np.ndarray:
    """Pairwise quadrature inner products of the normalized quasimodes."""
    n = len(quasimodes)
    G = np.zeros((n, n))
    for i, a in enumerate(quasimodes):
        for j, b in enumerate(quasimodes):
            if j < i:
                G[i, j] = G[j, i]
                continue
            G[i, j] = a.grid.cell_volume * float(np.dot(a.phi, b.phi))
    return G


@dataclass
class RayleighReport:
    value: float
    residual_ratio: float
    adjoint_ratio: float
    diagnostics: list


def rayleigh(P_h: OperatorMatrix, q: Quasimode) -> RayleighReport:
    """<P phi, phi> by sparse mat-vec and quadrature, with ||P phi||^2 and ||P* phi||^2 over it.

    The operator matrix is unscaled, so the quadrature weight is the cell volume.
    """
    phi = q.phi
    w = q.grid.cell_volume
    Pphi = P_h.P @ phi
    val = w * float(np.dot(Pphi, phi))
    Pt = P_h.P.T @ phi
    diags = list(q.diagnostics)
    spacing = min(q.grid.spacings[:q.grid.d])
    if spacing > 0.5 * np.sqrt(q.h) * q.tau:
        diags.append(f"grid spacing {spacing:g} does not resolve the channel width {np.sqrt(q.h) * q.tau:g}")
    res = w * float(np.dot(Pphi, Pphi)) / val if val != 0 else math.inf
    adj = w * float(np.dot(Pt, Pt)) / val if val != 0 else math.inf
    return RayleighReport(val, res, adj, diags)
