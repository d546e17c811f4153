import dataclasses

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from oracles import scalar_riccati
from vhempc import (ContractViolation, DesignFailure, SystemModel, TerminalIngredients,
                    build_terminal_ingredients, verify_assumption1)
from vhempc.terminal import dlqr_iterate, max_box_lyapunov, sample_ellipsoid


def test_scalar_lqr_matches_closed_form(scalar):
    P, K = scalar_riccati(0.9, 1.0, 1.0, 1.0)
    assert P == pytest.approx(1.4838999, abs=1e-7)
    assert K == pytest.approx(-0.53766656, abs=1e-8)
    assert scalar.ti.P[0, 0] == pytest.approx(P, rel=1e-9)
    assert scalar.ti.K_gain[0, 0] == pytest.approx(K, rel=1e-9)


def test_riccati_iteration_matches_scipy():
    A = np.array([[1.1, 0.3], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    Q, R = np.diag([1.0, 2.0]), np.array([[0.5]])
    P, K = dlqr_iterate(A, B, Q, R)
    P_ref = solve_discrete_are(A, B, Q, R)
    np.testing.assert_allclose(P, P_ref, rtol=1e-8)
    np.testing.assert_allclose(K, -np.linalg.solve(R + B.T @ P_ref @ B, B.T @ P_ref @ A), rtol=1e-8)


def test_unstabilisable_linearisation_fails():
    with pytest.raises(DesignFailure):
        dlqr_iterate([[2.0]], [[0.0]], [[1.0]], [[1.0]])


@pytest.mark.parametrize("plant", ["scalar", "cstr"])
def test_shipped_terminal_ingredients_verify(benchmarks, plant):
    bench = benchmarks[plant]
    ti = bench.ti
    assert ti.psi == pytest.approx(0.01 * ti.alpha)
    assert 0 < ti.alpha <= max_box_lyapunov(bench.model, ti.P)
    report = verify_assumption1(bench.model, ti, n_samples=10_000)
    assert report.passed
    assert report.n_admissibility_failures == 0


def test_sampler_covers_interior_and_boundary():
    rng = np.random.default_rng(1)
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    X = sample_ellipsoid(P, 3.0, 2000, rng)
    V = np.einsum("ij,jk,ik->i", X, P, X)
    assert np.all(V <= 3.0 * (1 + 1e-12))
    assert np.sum(np.isclose(V, 3.0)) >= 900
    assert np.sum(V < 1.5) > 100


def test_ingredient_validation(scalar):
    ti = scalar.ti
    good = dict(P=ti.P, K_gain=ti.K_gain, alpha=1.0, psi=0.01, gamma_Q=ti.gamma_Q,
                gamma_R=ti.gamma_R, input_lb=[-1.0], input_ub=[1.0])
    TerminalIngredients(**good)
    for bad in (dict(psi=2.0), dict(psi=0.0), dict(P=[[-1.0]]), dict(P=[[1.0, 0.2], [0.0, 1.0]])):
        with pytest.raises(ContractViolation):
            TerminalIngredients(**{**good, **bad})


def test_local_law_is_clamped(scalar):
    ti = scalar.ti
    assert ti.control([100.0])[0] == -1.0
    assert ti.control([0.5])[0] == pytest.approx(ti.K_gain[0, 0] * 0.5)


def test_lqr_without_dynamics_to_cancel():
    P, K = dlqr_iterate([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1.0) and K[0, 0] == pytest.approx(0.0)


def test_origin_and_level_set_membership(scalar):
    ti = scalar.ti
    assert ti.lyapunov([0.0]) == 0.0 and ti.control([0.0])[0] == 0.0
    assert ti.in_terminal_set([0.0]) and ti.in_psi_set([0.0])
    x = np.array([np.sqrt(ti.alpha / ti.P[0, 0])])
    assert ti.in_terminal_set(x) and not ti.in_psi_set(x)


def test_inflated_terminal_level_fails_admissibility(scalar):
    ti = dataclasses.replace(scalar.ti, alpha=100 * scalar.ti.alpha)
    report = verify_assumption1(scalar.model, ti)
    assert not report.passed and report.n_admissibility_failures > 0


def test_empty_sample_passes_trivially(scalar):
    report = verify_assumption1(scalar.model, scalar.ti, n_samples=0)
    assert report.passed and report.n_samples == 0
    d = report.to_dict()
    assert d["pass"] is True and {"max_decrease_violation", "n_admissibility_failures",
                                  "alpha", "psi"} <= set(d)


def test_impossible_decrease_fails_design(scalar):
    with pytest.raises(DesignFailure):
        build_terminal_ingredients(scalar.model, [[1.0]], [[1.0]], gamma_scale=1e6)


def test_exact_lqr_weights_pass_at_admissible_levels():
    # for a linear plant the Riccati identity makes the decrease an equality
    model = SystemModel(1, 1, lambda x, u: 0.9 * x + u, [-2.0], [2.0], [-1.0], [1.0])
    ti = build_terminal_ingredients(model, [[1.0]], [[1.0]], gamma_scale=1.0)
    for level in (ti.alpha, 0.5 * ti.alpha, 0.01 * ti.alpha):
        assert verify_assumption1(model, dataclasses.replace(ti, alpha=level, psi=0.01 * level)).passed
