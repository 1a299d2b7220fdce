import dataclasses

import numpy as np
import pytest

from mctoda.gspec import GSpec
from mctoda.indices import Idx, all_indices
from mctoda.toda_core import (ChargeViolation, DeformationParams, FactorConfig, birkhoff_factorize,
                              dress_state, eq_z_residual, factorize_and_dress, richardson_ratio,
                              solver_agreement, string_residual, verify_algebraic_relations)

from conftest import FACTOR_BASE

# frozen from the seed-0 state at FACTOR_BASE, default config
S_M1_AT_0 = np.array([[0.01665680331824555 + 0.00132587078688851j, -0.00812830087779737 - 0.01429003643572314j],
                      [-0.01061807799240709 - 0.00420758798407322j, 0.02091587572805512 + 0.00118431476641936j]])
L_0_AT_0 = np.array([[0.03139975973596216 + 0.00307509624458369j, -0.0088743601212325 - 0.0066078102966436j],
                     [-0.01076000411376466 - 0.00372978256145195j, 0.01049277572522658 - 0.00874369083044964j]])


@pytest.fixture(scope="module")
def state0():
    return factorize_and_dress(GSpec(seed=0), FACTOR_BASE)


def test_free_case_is_exact():
    # g = I and only t_11: W0 already lies in G+, so S = I and Sbar_1 = t E11
    p = DeformationParams(N=2, times=(((1, 1, False), 0.3),))
    f = birkhoff_factorize(GSpec(kind="identity"), p)
    assert f.S.max_norm(range(-6, 0)) == 0.0
    np.testing.assert_allclose(f.Sbar.at(1, 0), [[0.3, 0], [0, 0]], atol=1e-15)


def test_frozen_seed0_coefficients(state0):
    np.testing.assert_allclose(state0.S.at(-1, 0), S_M1_AT_0, atol=1e-13)
    np.testing.assert_allclose(state0.L.at(0, 0), L_0_AT_0, atol=1e-13)


@pytest.mark.parametrize("seed", [0, 7, 19])
def test_factorization_and_agreement(seed):
    f = birkhoff_factorize(GSpec(seed=seed), FACTOR_BASE)
    assert f.residual() <= 1e-10
    assert solver_agreement(f) <= 1e-9


def test_algebraic_relations(state0):
    r = verify_algebraic_relations(state0)
    assert max(r.values()) <= 1e-8, {k: v for k, v in r.items() if v > 1e-8}


def test_perturbed_dressing_is_caught(state0):
    f = state0.fact
    bad = dress_state(dataclasses.replace(f, S=f.S.map_bands(lambda c: c + 1e-4)))
    assert max(verify_algebraic_relations(bad).values()) > 1e-5


@pytest.mark.parametrize("a", all_indices(2), ids=str)
@pytest.mark.parametrize("j", [1, 2])
def test_flow_richardson(j, a):
    r1, r2, ratio = richardson_ratio(GSpec(seed=3), FACTOR_BASE, j, a)
    assert 3.2 <= ratio <= 4.8


@pytest.mark.parametrize("i,j", [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)])
def test_wave_eigen_relations(state0, i, j):
    for k in (1, 2):
        assert eq_z_residual(state0, i, j, k, 3.0 + 1.0j, 0) <= 1e-8


def test_trivial_string_equation(state0):
    one = [(1.0, 0, 0)]
    assert string_residual(state0, {a: one for a in all_indices(2)}) <= 1e-12
    assert string_residual(state0, {Idx(1): one, Idx(1, True): one}) > 1e-3


@pytest.mark.parametrize("charges,msg", [((1, 0, 0, 0), "total charge"), ((0, 0), "expected 4")])
def test_charge_violation(charges, msg):
    with pytest.raises(ChargeViolation, match=msg):
        DeformationParams(N=2, charges=charges)


def test_params_round_trip():
    p = FACTOR_BASE.shift_charges(Idx(1), Idx(2, True))
    assert sum(p.charges) == 0
    assert DeformationParams.from_dict(p.to_dict()) == p


def test_monomial_budget(state0):
    with pytest.raises(ValueError, match="band budget"):
        string_residual(state0, {Idx(1): [(1.0, 4, 4)]})


def test_small_K_config():
    f = birkhoff_factorize(GSpec(seed=2), FACTOR_BASE, FactorConfig(K=4, window=(-8, 8)))
    assert f.residual() <= 1e-10
