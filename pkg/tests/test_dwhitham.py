import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctoda import dwhitham as dw

DKDV = dw.OrbitTemplate((2,))


def dkdv_field(nodes=400, u=None):
    x = np.linspace(-1, 1, nodes)
    W = (x if u is None else u(x))[:, None].astype(complex)
    return dw.WhithamField(DKDV, x, W)


# -- series and rational calculus ---------------------------------------------------

coeff_lists = st.lists(st.complex_numbers(max_magnitude=2, allow_nan=False, allow_infinity=False),
                       min_size=6, max_size=6)


@settings(max_examples=40, deadline=None)
@given(tail=coeff_lists, n=st.integers(1, 4))
def test_root_inverts_power(tail, n):
    a = np.array([1.0 + 0j] + tail)
    r = dw.ps_root(a, n)
    np.testing.assert_allclose(dw.ps_pow(r, n), a, atol=1e-9 * (1 + np.max(np.abs(a))) ** n)


@settings(max_examples=40, deadline=None)
@given(tail=coeff_lists)
def test_series_inverse(tail):
    a = np.array([2.0 + 0j] + tail)
    e = dw.ps_mul(a, dw.ps_inv(a))
    np.testing.assert_allclose(e, np.eye(len(a))[0], atol=1e-9 * (1 + np.max(np.abs(a))) ** len(a))


def sample_rational(q, label=2):
    return dw.LogRational(np.array([0.5, -1.0, 1.0], complex),
                          (dw.Pole(label, np.array(q, complex), np.array([0.3, -0.2], complex)),))


@pytest.mark.parametrize("p", [2.0 + 1.0j, -1.5 + 0.3j, 3.0])
def test_rational_product_pointwise(p):
    F = sample_rational(0.4)
    G = dw.LogRational(np.array([1.0, 2.0], complex),
                       (dw.Pole(3, np.array(-0.7 + 0j), np.array([1.0, 0.0, 0.5], complex)),))
    assert abs((F * G)(p) - F(p) * G(p)) < 1e-12 * abs(F(p) * G(p))


def test_dp_matches_difference_quotient():
    F = sample_rational(0.4) + dw.LogRational(np.zeros(1, complex), (),
                                              (dw.LogTerm(2, np.array(0.4 + 0j), np.array(-1.0 + 0j)),))
    p, h = 1.7 + 0.4j, 1e-5
    fd = (F(p + h) - F(p - h)) / (2 * h)
    assert abs(F.dp()(p) - fd) < 1e-8


def test_missing_derivative():
    F = sample_rational(0.4)
    with pytest.raises(dw.MissingDerivative, match="first argument"):
        dw.poisson_bracket(F, dw.LogRational.p())


# -- charts and Omega ------------------------------------------------------------

def test_dkdv_omega_and_chart():
    # lambda = p^2 + u: Omega_3 = p^3 + 3/2 u p, z = p + u/(2p) - u^2/(8p^3) + ...
    u = 0.7
    orb = dw.AlgebraicOrbit(DKDV, np.array([u], complex))
    np.testing.assert_allclose(dw.omega_build(orb, 3, 1).poly, [0, 1.5 * u, 0, 1], atol=1e-15)
    ch = dw.orbit_local_expansion(orb, 1, 6)
    np.testing.assert_allclose([ch.ell(1), ch.ell(0), ch.ell(-1), ch.ell(-2), ch.ell(-3)],
                               [1, 0, u / 2, 0, -u ** 2 / 8], atol=1e-15)


def test_chart_is_root_of_lambda():
    tpl = dw.OrbitTemplate((2, 1))
    W = np.array([0.3, 0.5, 0.2], complex)  # u_10, q_2, u_21
    orb = dw.AlgebraicOrbit(tpl, W)
    p_far, p_near = 4.0 + 1.0j, 0.5 + 0.02j
    z1 = dw.orbit_local_expansion(orb, 1, 24)(p_far)
    z2 = dw.orbit_local_expansion(orb, 2, 24)(p_near)
    lam = tpl.lam(W)
    assert abs(z1 ** 2 - lam(p_far)) < 1e-12 * abs(lam(p_far))
    assert abs(z2 - lam(p_near)) < 1e-10 * abs(lam(p_near))


def test_degenerate_puncture():
    tpl = dw.OrbitTemplate((1, 1))
    with pytest.raises(dw.DegeneratePuncture, match="puncture 2"):
        dw.orbit_local_expansion(dw.AlgebraicOrbit(tpl, np.array([0.5, 0.0], complex)), 2)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_canonical_pair_exact(n):
    p = np.array([0.5 + 1.0j, 2.0, -1.3 + 0.2j])
    # exact up to rounding of the complex samples
    np.testing.assert_allclose(dw.canonical_pair_bracket(n, [1.0, 2.0], p), np.ones(3), rtol=0, atol=4e-16)


# -- flows -------------------------------------------------------------------

def test_dkdv_velocity():
    f = dkdv_field()
    V, rel = dw.flow_rhs(f, (3, 1))
    np.testing.assert_allclose(V[:, 0], 1.5 * f.x, atol=1e-9)
    assert rel < 1e-12


def test_off_orbit_detected():
    f = dkdv_field(50)
    with pytest.raises(dw.OffOrbit, match="off the Whitham orbit"):
        dw.flow_velocities(DKDV, f.W, f.Wx(), (3, 1), tol=-1.0)


def test_dkdv_characteristics():
    f = dkdv_field()
    t0 = time.perf_counter()
    tr = dw.flow_integrate(f, (3, 1), 0.3, 0.0037)
    el = time.perf_counter() - t0
    err = np.max(np.abs(tr.final().W[:, 0] - f.x / (1 - 1.5 * 0.3)))
    assert tr.flagged is None
    assert err <= 1e-6  # frozen: 7.2e-7
    assert el <= 10


def test_gradient_catastrophe_flagged():
    f = dkdv_field(60)
    tr = dw.flow_integrate(f, (3, 1), 0.75, 0.01, value_cap=1e3, gradient_cap=1e3)
    assert tr.flagged == "gradient catastrophe"
    assert tr.times[-1] < 2 / 3 + 0.01


def test_zakharov_shabat_convergence():
    res = []
    for dt, n in [(0.02, 41), (0.01, 81)]:
        g = dkdv_field(n, lambda x: 0.5 * np.sin(2 * x))
        res.append(dw.zs_residual(g, (2, 1), (3, 1), dt))
        assert dw.zs_residual(g, (3, 1), (3, 1), dt) == 0.0
    np.testing.assert_allclose(res, [3.08e-4, 7.70e-5], rtol=2e-2)
    assert res[0] / res[1] >= 3.5


def test_trajectory_csv_and_field_round_trip():
    f = dkdv_field(20)
    tr = dw.flow_integrate(f, (3, 1), 0.05, 0.01)
    rows = tr.to_csv_rows(stride=2)
    assert rows[0] == ["t", "x", "u/1/0.re", "u/1/0.im"]
    assert sorted({r[0] for r in rows[1:]}) == [tr.times[0], tr.times[2], tr.times[4], tr.times[5]]
    back = dw.WhithamField.from_dict(tr.final().to_dict())
    np.testing.assert_array_equal(back.W, tr.final().W)


# -- hodograph, canonical pairs, strings --------------------------------------------

def test_dkdv_hodograph_exact(dkdv_hodograph):
    t3, res = dkdv_hodograph
    x = res.field.x
    np.testing.assert_allclose(res.field.W[:, 0], x / (1 - 1.5 * t3), atol=1e-11)
    assert dw.canonical_residual(res.field, res.orlov, 1) <= 1e-9


def test_canonical_residual_detects_perturbation(dkdv_hodograph):
    _, res = dkdv_hodograph
    assert dw.canonical_residual(res.field, res.orlov.perturbed(1, 1, 1e-3), 1) > 1e-4


def test_condition_blows_up_towards_two_thirds():
    ot = dw.OrlovTemplate(degree=1)
    conds = []
    for t3 in (0.5, 0.6, 0.65, 0.66, 0.666):
        U = np.array([0.5 / (1 - 1.5 * t3), 0, 1.5 * (t3 - 2 / 3)])
        conds.append(float(np.squeeze(dw.jacobian_condition(DKDV, ot, {(3, 1): t3 - 2 / 3}, 0.5, U))))
    np.testing.assert_allclose(conds, [16, 145, 8080, 1.25e5, 1.25e8], rtol=0.05)


def test_non_generic_time_point():
    with pytest.raises(dw.HodographError, match="non-generic"):
        dw.hodograph_solve(DKDV, dw.OrlovTemplate(degree=1), {(3, 1): 0.0}, np.array([0.5]),
                           np.array([1.0, 0.0, 0.0]))


def test_two_puncture_solution(two_puncture):
    res = two_puncture
    assert np.max(res.cond) <= 1e3
    for a in (1, 2):
        assert dw.canonical_residual(res.field, res.orlov, a) <= 1e-6
    assert dw.dless_string_residual(res.field, res.orlov) <= 1e-6
    assert dw.dless_string_residual(res.field, res.orlov.perturbed(2, 1, 0.5)) > 1e-2


# -- pictures ----------------------------------------------------------------

def test_recentring_preserves_lambda(two_puncture):
    W = two_puncture.field.W[5]
    tpl = two_puncture.field.template
    T, WT = dw.kp_to_toda(tpl, W)
    q2 = tpl.unpack(W)[1][2]
    p = 1.3 + 0.7j
    np.testing.assert_allclose(T.lam(WT)(p - q2), tpl.lam(W)(p), atol=1e-13)


@pytest.mark.parametrize("flow", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_picture_consistency(two_puncture, flow):
    f = two_puncture.field
    assert dw.picture_consistency(f.template, f.W, f.Wx(), flow) <= 1e-9
