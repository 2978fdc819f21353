import numpy as np
import pytest

from kfpek.ek import ek_pipeline
from kfpek.hypo import hypo_report
from kfpek.landscape import analyze
from kfpek.model import preset
from kfpek.spectral import GridBox, cluster_threshold, discretize_P, small_eigs

DOUBLE_WELL = {4: 0.25, 2: -0.5, 1: 0.1}
SWEEP = (0.2, 0.15, 0.1, 0.07)
DW_GRID = GridBox(((-2.2, 2.0),), ((-2.5, 2.5),), (400, 200))

# criterion number -> list of (ok, detail); printed once per criterion at the end of the run
ACCEPTANCE: dict[int, list] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{'ok' if ok else 'FAILED'}: {d}" for ok, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


def double_well_cubic_roots():
    """Critical points of the tilted double well from the cubic x^3 - x + 0.1."""
    r = np.sort(np.roots([1.0, 0.0, -1.0, 0.1]).real)
    return r


def V_dw(x):
    return 0.25 * x ** 4 - 0.5 * x ** 2 + 0.1 * x


@pytest.fixture(scope="session")
def dw_sys():
    return preset("standard", {"potential": DOUBLE_WELL, "SigmaTSigma": 0.5})


@pytest.fixture(scope="session")
def dw_lab(dw_sys):
    return analyze(dw_sys.V, [(-2.5, 2.5)])


@pytest.fixture(scope="session")
def dw_ek(dw_sys, dw_lab):
    return ek_pipeline(dw_sys, dw_lab)


@pytest.fixture(scope="session")
def dw_hypo(dw_sys):
    return hypo_report(dw_sys, [(-2.2, 2.0)])


@pytest.fixture(scope="session")
def dw_spectra(dw_sys, dw_hypo):
    """h -> (OperatorMatrix, SpectrumResult) over the standard sweep on the 400 x 200 grid."""
    out = {}
    for h in SWEEP:
        P = discretize_P(dw_sys, h, DW_GRID)
        out[h] = (P, small_eigs(P, cluster_threshold(dw_hypo.g_of_h(h)), k=6))
    return out


def shallow_eigenvalue(res) -> float:
    vals = sorted(float(abs(z)) for z in res.cluster_values)
    return vals[1]


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)

