import numpy as np
import pytest

from mctoda import dwhitham as dw
from mctoda import scalar_whitham as sw
from mctoda.gspec import GSpec
from mctoda.toda_core import DeformationParams, FactorConfig

# scalar layer: bandwidth-4 preset, K = 16 on a short window
SCALAR_G = GSpec(seed=1, amplitude=0.1, bandwidth=4, decay=0.2)
SCALAR_CONFIG = FactorConfig(K=16, window=(-3, 3))
SCALAR_BASE = DeformationParams(N=2, times=(((1, 1, False), 0.05), ((1, 2, False), 0.03),
                                            ((1, 1, True), 0.04), ((1, 2, True), 0.02)))
FACTOR_BASE = DeformationParams(N=2, times=(((1, 1, False), 0.01), ((1, 2, True), 0.02)))

TWO_PUNCTURE_TIMES = {(2, 1): 0.3, (2, 2): 0.2, (1, 2): 0.1, (0, 2): 0.5}
TWO_PUNCTURE_GUESS = [-0.5, 2.5, 0.2, 0.6, 1.0]


@pytest.fixture(scope="session")
def scalar_cache():
    return sw.SGridCache(SCALAR_G, SCALAR_CONFIG)


@pytest.fixture(scope="session")
def two_puncture():
    tpl = dw.OrbitTemplate((1, 1))
    ot = dw.OrlovTemplate(degree=1, orders=((2, 1),))
    x = np.linspace(0.2, 0.6, 21)
    return dw.hodograph_solve(tpl, ot, TWO_PUNCTURE_TIMES, x, np.array(TWO_PUNCTURE_GUESS, complex))


@pytest.fixture(scope="session")
def dkdv_hodograph():
    tpl = dw.OrbitTemplate((2,))
    ot = dw.OrlovTemplate(degree=1)
    x = np.linspace(-1, 1, 41)
    t3 = 0.3
    guess = np.array([x[0] / (1 - 1.5 * t3), 0, 1.5 * (t3 - 2 / 3)])
    return t3, dw.hodograph_solve(tpl, ot, {(3, 1): t3 - 2 / 3}, x, guess)


# acceptance lines, one per criterion, repeated in the terminal summary
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
