import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctoda.core_ops import (BandedOperator, ClassMismatch, LatticeWindow, SingularLeadingCoefficient,
                             WindowExhausted, band_mul, commutator, from_dense, from_json_dict, invert, power,
                             split_project, to_dense, to_json_dict)


def random_op(rng, N, window, lo, hi, scale=1.0):
    w = window if isinstance(window, LatticeWindow) else LatticeWindow(*window)
    return BandedOperator(N, w, {j: scale * (rng.standard_normal((w.width, N, N))
                                             + 1j * rng.standard_normal((w.width, N, N)))
                                 for j in range(lo, hi + 1)})


def dense_block(D, N, w, n, m):
    i, k = n - w.n_min, m - w.n_min
    return D[i * N:(i + 1) * N, k * N:(k + 1) * N]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), N=st.integers(1, 3), lo=st.integers(-3, 0), hi=st.integers(0, 3))
def test_product_matches_dense(seed, N, lo, hi):
    rng = np.random.default_rng(seed)
    w = LatticeWindow(-8, 8)
    X = random_op(rng, N, w, lo, hi)
    Y = random_op(rng, N, w, -hi, -lo)
    Z = band_mul(X, Y)
    D = to_dense(X) @ to_dense(Y)
    for k, c in Z.bands.items():
        for n in Z.window.indices():
            if w.n_min <= n + k <= w.n_max:
                np.testing.assert_allclose(c[n - Z.window.n_min], dense_block(D, N, w, n, n + k), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_product_associative(seed):
    rng = np.random.default_rng(seed)
    w = (-10, 10)
    X, Y, Z = (random_op(rng, 2, w, -1, 1) for _ in range(3))
    left = band_mul(band_mul(X, Y), Z)
    right = band_mul(X, band_mul(Y, Z))
    assert (left.restrict(right.window.intersect(left.window)) -
            right.restrict(right.window.intersect(left.window))).max_norm() < 1e-12


def test_shift_lattice_commutator():
    # [Lambda, n] = Lambda
    w = (-5, 5)
    Lam = BandedOperator.shift(1, 2, w)
    n = BandedOperator.lattice_n(2, w)
    R = commutator(Lam, n) - Lam.restrict(commutator(Lam, n).window)
    assert R.max_norm() == 0.0


def test_split_project_is_direct_sum():
    X = random_op(np.random.default_rng(0), 2, (-4, 4), -3, 3)
    plus, minus = split_project(X, "plus"), split_project(X, "minus")
    assert min(plus.bands) == 0 and max(minus.bands) == -1
    assert (plus + minus - X).max_norm() == 0.0
    with pytest.raises(ValueError):
        split_project(X, "middle")


@pytest.mark.parametrize("cls,lo,hi", [("Gminus", -2, -1), ("Gplus", 0, 2)])
def test_invert_against_dense(cls, lo, hi):
    rng = np.random.default_rng(4)
    N, w = 2, LatticeWindow(-20, 20)
    X = random_op(rng, N, w, lo, hi, 0.1)
    if cls == "Gminus":
        X = X + BandedOperator.identity(N, w)
    else:
        X = X + BandedOperator.identity(N, w).scale(2.0)
    order = 12
    Y = invert(X, cls, order)
    P = band_mul(X, Y) if cls == "Gplus" else band_mul(Y, X)
    inner = P.window.shrink(order, order)
    R = (P - BandedOperator.identity(N, P.window)).restrict(inner)
    assert R.max_norm(range(-order + 2, order - 1)) < 1e-9


def test_invert_rejects_wrong_class():
    X = BandedOperator.shift(1, 2, (-4, 4))
    with pytest.raises(ClassMismatch, match="class mismatch"):
        invert(X, "Gminus", 3)
    zero_lead = BandedOperator.from_constant_bands({0: np.zeros((2, 2))}, 2, (-4, 4))
    with pytest.raises(SingularLeadingCoefficient):
        invert(zero_lead, "Gplus", 3)


def test_power_and_negative_power():
    w = (-10, 10)
    L = BandedOperator.shift(1, 1, w)
    Linv = BandedOperator.shift(-1, 1, w)
    assert list(power(L, 3).bands) == [3]
    assert list(power(L, -2, inverse=Linv).bands) == [-2]
    with pytest.raises(ValueError, match="inverse"):
        power(L, -1)


def test_window_exhausted():
    X = BandedOperator.shift(5, 1, (-2, 2))
    with pytest.raises(WindowExhausted, match="window exhausted"):
        band_mul(X, X)
    with pytest.raises(WindowExhausted):
        X.restrict((-3, 3))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dense_and_json_round_trip(seed):
    X = random_op(np.random.default_rng(seed), 2, (-6, 6), -2, 2)
    back = from_dense(to_dense(X), 2, X.window, bands=range(-2, 3))
    # entries whose column leaves the window are lost in the dense form
    inner = X.window.shrink(2, 2)
    assert (back.restrict(inner) - X.restrict(inner)).max_norm() == 0.0
    assert (from_json_dict(to_json_dict(X)) - X).max_norm() == 0.0


def test_band_shape_validation():
    with pytest.raises(ValueError, match="band 0"):
        BandedOperator(2, LatticeWindow(0, 3), {0: np.zeros((3, 2, 2))})
