import json
import math

import mpmath
import numpy as np
import pytest

from conftest import double_well_cubic_roots
from kfpek.model import preset
from kfpek.sde import (SdeConfig, TrajectoryAborted, arrhenius_fit, gibbs_bin_masses, invariant_histogram, mfpt,
                       simulate, trajectory_samples)

EDGES = [np.linspace(-2, 2, 17)] * 2


def harmonic():
    return preset("standard", {"potential": {2: 0.5}, "SigmaTSigma": 0.5})


def _shallow(lab):
    return next(i for i, r in enumerate(lab.records) if not r.is_global)


# dynamics

def test_noiseless_flow_dissipates_f(dw_sys):
    x0 = np.linspace(-2, 2, 20)[:, None]
    v0 = np.linspace(-2, 2, 20)[:, None]
    bumps = []
    for dt in (0.02, 0.005):
        f = simulate(dw_sys, SdeConfig(0.0, dt, 10.0, 20, seed=1, record_every=1), x0, v0).f_values(dw_sys)
        assert np.all(f[-1] < f[0])
        bumps.append(np.diff(f, axis=0).max())
    # the continuous flow never raises f; Euler steps do, by O(dt^2) near turning points
    assert bumps[1] <= bumps[0] / 10


def test_harmonic_stationary_variance():
    h = 0.2
    n = 1000
    tr = simulate(harmonic(), SdeConfig.default(h, 100.0, n, seed=2, record_every=25), [0.0], [0.0])
    smp = trajectory_samples(tr, burn_in=10.0)
    # e^{-2f/h} = e^{-(x^2 + v^2)/h}: both marginals have variance h/2
    assert smp[:, 0].var() == pytest.approx(h / 2, rel=0.03)
    assert smp[:, 1].var() == pytest.approx(h / 2, rel=0.03)


def test_reruns_are_bit_identical(dw_sys):
    cfg = SdeConfig.default(0.3, 2.0, 300, seed=9)
    a = simulate(dw_sys, cfg, [0.5], [0.0])
    b = simulate(dw_sys, cfg, [0.5], [0.0])
    c = simulate(dw_sys, SdeConfig.default(0.3, 2.0, 300, seed=10), [0.5], [0.0])
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
    assert not np.array_equal(a.x, c.x)


def test_double_well_population_matches_quadrature(dw_sys):
    h = 0.3
    m1, s, m2 = double_well_cubic_roots()
    w = lambda x: mpmath.exp(-2 * (x ** 4 / 4 - x ** 2 / 2 + x / 10) / h)
    deep = float(mpmath.quad(w, [-mpmath.inf, s]) / mpmath.quad(w, [-mpmath.inf, s, mpmath.inf]))
    n = 200
    x0 = np.array([m1] * (n // 2) + [m2] * (n // 2))[:, None]
    tr = simulate(dw_sys, SdeConfig.default(h, 400.0, n, seed=5, record_every=50), x0, [0.0])
    smp = trajectory_samples(tr, burn_in=100.0)
    assert np.mean(smp[:, 0] < s) == pytest.approx(deep, abs=0.03)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_confining_potential_aborts():
    with pytest.raises(TrajectoryAborted):
        simulate(preset("standard", {"potential": {4: -1.0}}), SdeConfig.default(0.1, 5.0, 4), [3.0], [0.0])


# invariant histogram

def test_bin_masses_are_normalized_gaussians():
    h = 0.2
    masses = gibbs_bin_masses(harmonic(), h, EDGES)
    assert masses.sum() == pytest.approx(1.0, abs=1e-14)
    # the x-marginal of a bin column against the normal CDF restricted to the window
    cdf = np.array([0.5 * (1 + math.erf(e / math.sqrt(h))) for e in EDGES[0]])
    col = np.diff(cdf) / (cdf[-1] - cdf[0])
    assert masses.sum(axis=1) == pytest.approx(col, abs=1e-4)


def test_unmixed_samples_have_large_tv():
    h = 0.2
    sys_ = harmonic()
    tr = simulate(sys_, SdeConfig.default(h, 0.004, 500, seed=2), [0.1], [0.1])
    rep = invariant_histogram(trajectory_samples(tr), sys_, h, EDGES)
    # all samples lie in the window, so TV = 1 - sum of the overlap min(empirical, exact)
    assert rep.empirical.sum() == pytest.approx(1.0, abs=1e-12)
    assert rep.tv == pytest.approx(1 - np.minimum(rep.empirical, rep.exact).sum(), abs=1e-12)
    assert rep.empirical[8, 8] > 0.9
    assert rep.tv > 0.8


# first passage

def test_global_minimum_start_is_censored(dw_sys, dw_lab):
    glob = next(i for i, r in enumerate(dw_lab.records) if r.is_global)
    st = mfpt(dw_sys, SdeConfig.default(0.2, 1.0, 50), glob, dw_lab)
    assert st.mean is None and st.censored == 50 and st.eigenvalue_scale is None
    assert json.loads(st.to_json())["target"] == "none"


def test_short_horizon_censors_everything(dw_sys, dw_lab):
    st = mfpt(dw_sys, SdeConfig.default(0.1, 0.5, 40, seed=1), _shallow(dw_lab), dw_lab)
    assert st.escapes == 0 and st.censored == 40 and st.rate is None


def test_arrhenius_sweep(dw_sys, dw_lab):
    m = _shallow(dw_lab)
    hs = (0.35, 0.3, 0.25, 0.2)
    times = []
    for h in hs:
        st = mfpt(dw_sys, SdeConfig.default(h, 500.0, 1000, seed=12), m, dw_lab)
        assert st.censored == 0
        times.append(st.mean)
    two_S = 2 * dw_lab.records[m].S
    assert arrhenius_fit(hs, times) == pytest.approx(two_S, rel=0.10)


def test_arrhenius_fit_is_exact_on_synthetic_data():
    hs = np.array([0.4, 0.3, 0.2])
    assert arrhenius_fit(hs, 3.0 * np.exp(0.7 / hs)) == pytest.approx(0.7, rel=1e-12)


# configuration

@pytest.mark.parametrize("kw", [dict(h=0.1, dt=0.01), dict(h=-0.1, dt=1e-3), dict(h=0.1, dt=0.0),
                                dict(h=0.1, dt=1e-3, seed=-1), dict(h=0.1, dt=1e-3, scheme="heun")])
def test_invalid_config_rejected(kw):
    base = dict(T_max=1.0, n_traj=1)
    with pytest.raises(ValueError):
        SdeConfig(**{**base, **kw})


def test_default_step_respects_bound():
    assert SdeConfig.default(0.3, 1.0, 1).dt == pytest.approx(0.3 / 50)
    assert SdeConfig.default(2.0, 1.0, 1).dt == pytest.approx(1 / 50)
    assert SdeConfig.default(0.0, 1.0, 1).dt == pytest.approx(1 / 50)
