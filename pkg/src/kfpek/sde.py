"""Euler-Maruyama simulation of the kinetic SDE, invariant histograms and escape times.

    dx = alpha dt,   dv = (beta - 4 g S v) dt + sqrt(2 h g) dB.

Escape rates are in SDE time; the matching eigenvalue of P is h times the rate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .landscape import Labeling
from .model import CoefficientSystem, eval_f

BLOCK = 256


class TrajectoryAborted(FloatingPointError):
    def __init__(self, step: int, n_bad: int):
        super().__init__(f"non-finite state at step {step} in {n_bad} trajectories (dt too large or V not confining)")
        self.step = step


@dataclass(frozen=True)
class SdeConfig:
    h: float
    dt: float
    T_max: float
    n_traj: int
    seed: int = 0
    scheme: str = "euler-maruyama"
    record_every: int = 0

    def __post_init__(self):
        if self.scheme != "euler-maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.h < 0:
            raise ValueError("h must be nonnegative")
        # h = 0 is the noiseless flow, where only the O(1) drift scale matters
        lim = (min(self.h, 1.0) if self.h > 0 else 1.0) / 50
        if self.dt <= 0 or self.dt > lim + 1e-15:
            raise ValueError(f"dt = {self.dt:g} violates dt <= min(h, 1)/50 = {lim:g}")
        if self.n_traj < 1 or self.T_max <= 0:
            raise ValueError("n_traj >= 1 and T_max > 0 are required")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def default(cls, h: float, T_max: float, n_traj: int, seed: int = 0, **kw) -> "SdeConfig":
        return cls(h, (min(h, 1.0) if h > 0 else 1.0) / 50, T_max, n_traj, seed, **kw)

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.T_max / self.dt - 1e-9))


def block_generators(seed: int, n_traj: int, block: int = BLOCK) -> list[np.random.Generator]:
    """One counter-based stream per fixed-size trajectory block, independent of scheduling."""
    n_blocks = (n_traj + block - 1) // block
    children = np.random.SeedSequence(int(seed)).spawn(n_blocks)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _as_states(x0, v0, n: int, d: int, dv: int):
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, d) if np.ndim(x0) > 1 else
                        np.asarray(x0, dtype=float).reshape(1, d), (n, d)).copy()
    v = np.broadcast_to(np.asarray(v0, dtype=float).reshape(-1, dv) if np.ndim(v0) > 1 else
                        np.asarray(v0, dtype=float).reshape(1, dv), (n, dv)).copy()
    return x, v


def _step(sys: CoefficientSystem, x, v, h, dt, noise):
    ax, bv = sys.drift(x, v, h)
    g = sys.diffusion_values(x)
    xn = x + ax * dt
    vn = v + bv * dt + np.sqrt(2 * h * g * dt)[:, None] * noise
    return xn, vn


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray

    def f_values(self, sys: CoefficientSystem) -> np.ndarray:
        return eval_f(sys, self.x, self.v)


def simulate(sys: CoefficientSystem, cfg: SdeConfig, x0, v0) -> Trajectory:
    """All trajectories to T_max, recording every ``record_every`` steps (default: about 200 records)."""
    d, dv = sys.d, sys.dv
    n = cfg.n_traj
    steps = cfg.n_steps
    every = cfg.record_every or max(1, steps // 200)
    x, v = _as_states(x0, v0, n, d, dv)
    gens = block_generators(cfg.seed, n)
    times, xs, vs = [0.0], [x.copy()], [v.copy()]
    for k in range(1, steps + 1):
        noise = np.concatenate([g.standard_normal((min(BLOCK, n - b * BLOCK), dv)) for b, g in enumerate(gens)])
        x, v = _step(sys, x, v, cfg.h, cfg.dt, noise)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            bad = ~(np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(v), axis=1))
            raise TrajectoryAborted(k, int(bad.sum()))
        if k % every == 0 or k == steps:
            times.append(k * cfg.dt)
            xs.append(x.copy())
            vs.append(v.copy())
    return Trajectory(np.array(times), np.stack(xs), np.stack(vs))


# ---------------------------------------------------------------------------
# invariant measure


@dataclass
class HistogramReport:
    tv: float
    empirical: np.ndarray
    exact: np.ndarray
    under_sampled: int
    n_samples: int


def gibbs_bin_masses(sys: CoefficientSystem, h: float, edges: Sequence[np.ndarray], sub: int = 8) -> np.ndarray:
    """Normalized masses of exp(-2f/h) over a tensor product of bins (midpoint rule on sub-cells)."""
    pts_axes, w_axes = [], []
    for e in edges:
        e = np.asarray(e, dtype=float)
        fine = np.concatenate([np.linspace(a, b, sub + 1)[:-1] + (b - a) / (2 * sub) for a, b in zip(e[:-1], e[1:])])
        pts_axes.append(fine)
        w_axes.append(np.repeat(np.diff(e) / sub, sub))
    mesh = np.meshgrid(*pts_axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    wts = np.ones(1)
    for w in w_axes:
        wts = np.multiply.outer(wts, w)
    wts = wts.reshape(-1)
    f = eval_f(sys, pts[:, :sys.d], pts[:, sys.d:])
    dens = np.exp(-2 * (f - f.min()) / h) * wts
    shape = tuple(len(e) - 1 for e in edges)
    fine_shape = []
    for s in shape:
        fine_shape += [s, sub]
    dens = dens.reshape(tuple(len(p) for p in pts_axes))
    dens = dens.reshape(fine_shape).sum(axis=tuple(range(1, 2 * len(shape), 2)))
    return dens / dens.sum()


def invariant_histogram(samples: np.ndarray, sys: CoefficientSystem, h: float,
                        edges: Sequence[np.ndarray], min_expected: float = 5.0) -> HistogramReport:
    """Total-variation distance between binned samples (N, d + d') and exp(-2f/h) on the same bins."""
    samples = np.asarray(samples, dtype=float)
    H, _ = np.histogramdd(samples, bins=[np.asarray(e, dtype=float) for e in edges])
    n = samples.shape[0]
    emp = H / n
    exact = gibbs_bin_masses(sys, h, edges)
    # mass outside the binned window counts as disagreement for the empirical side
    tv = 0.5 * (float(np.abs(emp - exact).sum()) + (1 - float(emp.sum())))
    under = int(np.sum(exact * n < min_expected))
    return HistogramReport(tv, emp, exact, under, n)


def trajectory_samples(traj: Trajectory, burn_in: float = 0.0) -> np.ndarray:
    keep = traj.times >= burn_in
    x = traj.x[keep].reshape(-1, traj.x.shape[-1])
    v = traj.v[keep].reshape(-1, traj.v.shape[-1])
    return np.concatenate([x, v], axis=1)


# ---------------------------------------------------------------------------
# first passage


@dataclass
class MfptStats:
    start: int
    target: str
    mean: float | None
    stderr: float | None
    rate: float | None
    escapes: int
    censored: int
    T_max: float
    h: float
    notes: list = field(default_factory=list)

    @property
    def eigenvalue_scale(self) -> float | None:
        """h times the rate: the quantity comparable with eigenvalues of P."""
        return None if self.rate is None else self.h * self.rate

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


class BasinMap:
    """Grid classification of x into components of {V < level}."""

    def __init__(self, sys: CoefficientSystem, box: Sequence, level: float, n_per_axis: int = 400):
        d = sys.d
        self.axes = [np.linspace(lo, hi, n_per_axis) for lo, hi in box]
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        vals = sys.V.value(pts).reshape((n_per_axis,) * d)
        self.values = vals
        self.labels, _ = ndimage.label(vals < level)
        self.lo = np.array([a[0] for a in self.axes])
        self.step = np.array([a[1] - a[0] for a in self.axes])
        self.n = n_per_axis

    def cell(self, x: np.ndarray) -> tuple:
        idx = np.clip(np.rint((x - self.lo) / self.step).astype(int), 0, self.n - 1)
        return tuple(idx.T)

    def label_of(self, x: np.ndarray) -> np.ndarray:
        return self.labels[self.cell(np.atleast_2d(x))]


def mfpt(sys: CoefficientSystem, cfg: SdeConfig, start_minimum: int, labeling: Labeling,
         box: Sequence | None = None, depth: float = 0.5, n_per_axis: int = 400) -> MfptStats:
    """Time until the x-projection reaches a lower well across the barrier of ``start_minimum``.

    The target is the part of {V < sigma(m) - depth S(m)} outside the component
    that contains m. Trajectories start at rest in the minimum.
    """
    rec = labeling.records[start_minimum]
    notes = []
    if sys.extra_variables:
        notes.append("escape measured through the position variables' barrier only")
    if rec.is_global:
        return MfptStats(start_minimum, "none", None, None, None, 0, cfg.n_traj, cfg.T_max, cfg.h,
                         notes + ["global minimum: no lower well"])
    d, dv = sys.d, sys.dv
    m = np.asarray(rec.minimum.location, dtype=float)
    if box is None:
        locs = np.array([c.location for c in labeling.criticals])
        lo, hi = locs.min(axis=0) - 1.0, locs.max(axis=0) + 1.0
        box = list(zip(lo, hi))
    level = rec.sigma - depth * rec.S
    basins = BasinMap(sys, box, level, n_per_axis)
    home = basins.label_of(m)[0]
    n = cfg.n_traj
    x, v = _as_states(m, np.zeros(dv), n, d, dv)
    gens = block_generators(cfg.seed, n)
    hit = np.full(n, np.nan)
    alive = np.ones(n, dtype=bool)
    for k in range(1, cfg.n_steps + 1):
        # every trajectory draws noise so streams do not depend on who has escaped
        noise = np.concatenate([g.standard_normal((min(BLOCK, n - b * BLOCK), dv)) for b, g in enumerate(gens)])
        idx = np.nonzero(alive)[0]
        xa, va = _step(sys, x[idx], v[idx], cfg.h, cfg.dt, noise[idx])
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(va))):
            raise TrajectoryAborted(k, int(np.sum(~np.isfinite(xa).all(axis=1))))
        x[idx], v[idx] = xa, va
        lab = basins.label_of(xa)
        done = (lab != 0) & (lab != home)
        if done.any():
            hit[idx[done]] = k * cfg.dt
            alive[idx[done]] = False
        if not alive.any():
            break
    esc = ~np.isnan(hit)
    n_esc = int(esc.sum())
    cens = n - n_esc
    if n_esc == 0:
        return MfptStats(start_minimum, "lower well", None, None, None, 0, cens, cfg.T_max, cfg.h,
                         notes + ["no escapes within T_max"])
    times = np.sort(hit[esc])
    exposure = math.fsum(times.tolist()) + cens * cfg.T_max
    rate = n_esc / exposure
    mean = 1 / rate
    return MfptStats(start_minimum, "lower well", mean, mean / math.sqrt(n_esc), rate, n_esc, cens,
                     cfg.T_max, cfg.h, notes)


def arrhenius_fit(h_values: Sequence[float], mean_times: Sequence[float]) -> float:
    """Fitted 2S from ln MFPT ~ 2S/h + const."""
    hs = np.asarray(h_values, dtype=float)
    T = np.asarray(mean_times, dtype=float)
    return float(np.polyfit(1 / hs, np.log(T), 1)[0])
