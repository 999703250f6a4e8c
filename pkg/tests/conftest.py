"""Shared fixtures.

Small fixture: background 1 with an eps=12 square rod on [0.25, 0.75]^2,
k_x = pi/2, N = 8, N_y = 9; its lowest gap has a single edge point at k = -pi.
Nine fiber momenta are too few to certify the edge curvature, so the CLI
tests use N_y = 17.
The desk-scale fixture (N = 32, N_y = 33) lives in test_acceptance.py.
"""

import numpy as np
import pytest

from linedefect.bloch import analyze_gap, compute_bands, detect_gaps, sort_analytic
from linedefect.bs import build_K
from linedefect.discretize import assemble_forms, build_mesh, fiber_momenta
from linedefect.medium import Rect, apply_line_defect, build_periodic_medium, periodic_extension

KX = np.pi / 2
ROD = Rect(0.25, 0.75, 0.25, 0.75, 12.0)
SMALL_DEFECT = Rect(0.0, 0.25, 0.0, 0.25, 1.0)


class Small:
    N, N_y = 8, 9

    def __init__(self):
        self.eps0 = build_periodic_medium(1.0, [ROD], self.N)
        self.table = sort_analytic(compute_bands(self.eps0, KX, fiber_momenta(self.N_y), 8))
        raw = [g for g in detect_gaps(self.table, (0.0, 60.0))][0]
        self.report = analyze_gap(self.table, raw)
        self.gap = (self.report.lam0, self.report.lam1)
        self.mesh = build_mesh(self.N, self.N_y, KX)
        self.base = periodic_extension(self.eps0, self.N_y)
        self.forms0 = assemble_forms(self.mesh, self.base)
        self._cache = {}

    def eps1(self, t, defect=(SMALL_DEFECT,)):
        return apply_line_defect(self.eps0, list(defect), t, self.N_y)

    def forms1(self, t):
        return assemble_forms(self.mesh, self.eps1(t))

    def state(self, t):
        if t not in self._cache:
            self._cache[t] = build_K(self.forms0, self.forms1(t))
        return self._cache[t]


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
