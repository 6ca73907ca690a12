import math

import numpy as np
import pytest

from qcbadc.control import derive_control_params, lowpass_control_params
from qcbadc.system import leapfrog_lowpass, quadrature_extend

F_S = 2.0 ** 31


def omega_B_for(osr, f_s=F_S):
    # f_s = 2 beta and beta = omega_B osr / (2 pi)
    return math.pi * f_s / osr


def make_lowpass(N, osr):
    design, lp = leapfrog_lowpass(N, osr, omega_B_for(osr))
    return design, lp, lowpass_control_params(design.beta)


def make_quadrature(N, osr, f_n):
    design, lp = leapfrog_lowpass(N, osr, omega_B_for(osr))
    w_n = 2 * math.pi * f_n
    p = derive_control_params(design.beta, w_n)
    return design, quadrature_extend(lp, w_n, p), p


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def record(criterion, part, ok, detail=""):
    """Register one checked part of an acceptance criterion for the summary."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}")
        for part, ok, detail in parts:
            terminalreporter.write_line(f"    {'ok  ' if ok else 'FAIL'} {part}: {detail}")
