import numpy as np
import pytest

from mctoda import scalar_whitham as sw
from mctoda.core_ops import LatticeWindow
from mctoda.indices import Idx, all_indices

from conftest import SCALAR_BASE as BASE

INDICES = all_indices(2)
# slow times of the scan configuration
SCAN_TIMES = {(1, 1, False): 0.1, (1, 2, False): 0.05, (1, 1, True): 0.08, (1, 2, True): 0.04,
              (2, 1, False): 0.02, (2, 1, True): 0.02}


def series(coeffs, w=(-4, 4), a=Idx(1)):
    w = LatticeWindow(*w)
    return sw.ShiftOpSeries(a, False, w, {j: np.full(w.width, c, complex) for j, c in coeffs.items()})


def test_generator_inverse():
    T = series({1: 1.0})
    Tinv = series({-1: 1.0})
    P = T @ Tinv
    assert P.bands() == [0] and P.coeff(0, 0) == 1


def test_shift_reads_neighbour_and_tracks_nan():
    w = LatticeWindow(-3, 3)
    f = sw.ShiftOpSeries.from_function(Idx(1), False, w, 0, lambda m: m.astype(float))
    T = series({1: 1.0}, (-3, 3))
    Tf = T @ f
    assert Tf.coeff(1, 0) == 1.0
    with pytest.raises(sw.CacheMiss, match="outside the grid"):
        Tf.coeff(1, 3)


def test_invert_lower():
    X = series({0: 2.0, -1: 0.5, -2: 0.25})
    Y = sw.invert_lower(X, 6)
    P = (X @ Y).truncate(lo=-6)
    assert abs(P.coeff(0, 4) - 1) < 1e-15
    assert max(abs(P.coeff(-k, 4)) for k in range(1, 5)) < 1e-15
    with pytest.raises(sw.DegenerateDressing):
        sw.invert_lower(series({-1: 1.0}), 3)


@pytest.mark.parametrize("a,fam,lo", [(Idx(1), False, 0), (Idx(2), False, 1), (Idx(1), True, 0)])
def test_projection_rules(a, fam, lo):
    w = LatticeWindow(-2, 2)
    X = sw.ShiftOpSeries(a, fam, w, {j: np.ones(w.width, complex) for j in range(-2, 3)})
    plus = sw.projection(X, BASE, "plus")
    assert min(plus.bands()) == lo
    comp = sw.projection(X, BASE, "complement")
    assert all(abs((plus + comp - X).coeff(j, 0)) < 1e-15 for j in range(-2, 3))


def test_projection_bared_family_subtracts_constant():
    w = LatticeWindow(-2, 2)
    X = sw.ShiftOpSeries(Idx(2), True, w, {j: np.ones(w.width, complex) for j in range(-2, 3)})
    plus = sw.projection(X, BASE, "plus")
    # sum_{j>0} c_j (T^j - 1): the constant cancels the positive coefficients
    assert plus.coeff(0, 0) == -2


@pytest.mark.parametrize("a", INDICES, ids=str)
def test_row_action_lax_and_orlov(scalar_cache, a):
    for i, j in [(0, 1), (1, 0)]:
        r = sw.verify_row_action(scalar_cache, BASE, a, i, j)
        assert max(r.values()) <= 1e-7, r


@pytest.mark.parametrize("i,j", [(0, -2), (1, -1), (1, 2)])
def test_row_action_higher_monomials(scalar_cache, i, j):
    # negative powers need a longer tail
    r = sw.verify_row_action(scalar_cache, BASE, "2b", i, j, js=5)
    assert max(r.values()) <= 1e-7, r


def test_row_action_converges_in_tail_length(scalar_cache):
    r = [max(sw.verify_row_action(scalar_cache, BASE, "2", 0, -2, js=js).values()) for js in (3, 4, 5)]
    assert r[0] > r[1] > r[2]


@pytest.mark.parametrize("a", INDICES, ids=str)
@pytest.mark.parametrize("i,j", [(0, -2), (0, 0), (0, 2), (1, -1), (1, 1)])
def test_projection_identity(scalar_cache, a, i, j):
    r = sw.verify_projection_identity(scalar_cache, BASE, a, i, j)
    assert max(r.values()) <= 1e-8, r


@pytest.mark.parametrize("a", INDICES, ids=str)
def test_commutator(scalar_cache, a):
    assert sw.commutator_residual(scalar_cache, BASE, a) <= 1e-7


def test_product_action(scalar_cache):
    assert sw.verify_product_action(scalar_cache, BASE, "1", (1, 0), (0, 1)) <= 1e-7
    with pytest.raises(ValueError):
        sw.verify_product_action(scalar_cache, BASE, "1", (2, 0), (1, 0))


@pytest.mark.parametrize("j,a", [(1, "1"), (2, "2b")])
def test_scalar_flow_ratio(scalar_cache, j, a):
    r1, r2, ratio = sw.verify_scalar_flows(scalar_cache, BASE, j, a)
    assert 3.2 <= ratio <= 4.8


def test_flow_pair_agreement(scalar_cache):
    assert sw.flow_pair_agreement(scalar_cache, BASE, "1", 1) <= 1e-8


def test_small_line_range_raises(scalar_cache):
    slo = sw.scalar_lax_orlov(scalar_cache, BASE, "1", False, line_range=(-2, 2))
    with pytest.raises(sw.CacheMiss):
        slo.monomial(1, 2).coeff(-3, 0)


def test_scan_rejects_ascending_ladder():
    with pytest.raises(ValueError, match="descending"):
        sw.quasiclassical_scan(sw.ScanFamily(), SCAN_TIMES, eps_ladder=(0.1, 0.2))


@pytest.mark.slow
def test_scan_seed2_frozen():
    r = sw.quasiclassical_scan(sw.ScanFamily(seed=2), SCAN_TIMES)
    res = [row["residual"] for row in r.table()]
    np.testing.assert_allclose(res, [1.56e-4, 8.27e-5, 4.46e-5], rtol=1e-2)
    assert r.monotone
