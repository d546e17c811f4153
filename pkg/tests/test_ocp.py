import dataclasses

import numpy as np
import pytest

from conftest import feasible_random_inputs
from oracles import grid_optimum, scalar_costs
from vhempc import ContractViolation, FhocpSpec, InfeasibleProblem, solve, stabilizing_value
from vhempc.filters import k_extend
from vhempc.ocp import AUXILIARY, _Shooting, cold_starts, evaluate_inputs


def _scalar_oracle(bench, aux, x0, N, pi):
    ti = bench.ti

    def costs(U):
        return scalar_costs(U, x0, 0.9, ti.P[0, 0], ti.alpha, ti.gamma_Q[0, 0], ti.gamma_R[0, 0],
                            aux.d, aux.b, aux.lam)

    def box(X):
        return np.hstack([2 - X[:, 1:], X[:, 1:] + 2])

    econ = grid_optimum(lambda U: costs(U)[1],
                        lambda U: np.hstack([box(costs(U)[0]), (pi - costs(U)[2])[:, None]]), N)[1]
    stab = grid_optimum(lambda U: costs(U)[2], lambda U: box(costs(U)[0]), N)[1]
    return econ, stab


@pytest.mark.parametrize("x0,N", [(1.9, 2), (-1.2, 1), (0.4, 3), (-1.7, 3)])
def test_scalar_solver_matches_grid_oracle(scalar, x0, N):
    aux = scalar.aux()
    pi = aux.feasible_bound(N)
    econ_ref, stab_ref = _scalar_oracle(scalar, aux, x0, N, pi)
    rec = solve(FhocpSpec(scalar.model, scalar.econ, aux, [x0], N, pi_bound=pi))
    assert rec.feasible and rec.aux_value <= pi
    assert abs(rec.objective - econ_ref) <= 1e-3
    stab = stabilizing_value(FhocpSpec(scalar.model, scalar.econ, aux, [x0], N, objective_kind=AUXILIARY))
    assert abs(stab.aux_value - stab_ref) <= 1e-3


def test_infeasible_filter_bound_raises(scalar):
    with pytest.raises(InfeasibleProblem):
        solve(FhocpSpec(scalar.model, scalar.econ, scalar.aux(), [1.9], 2, pi_bound=0.01))


@pytest.mark.parametrize("plant", ["scalar", "cstr"])
def test_warm_start_dominance(benchmarks, plant):
    bench = benchmarks[plant]
    aux = bench.aux()
    rng = np.random.default_rng(3)
    x0 = bench.to_deviation(bench.defaults["x0"])
    for N in (2, 4):
        U = feasible_random_inputs(bench.model, x0, N, rng)
        warm = evaluate_inputs(FhocpSpec(bench.model, bench.econ, aux, x0, N), U)
        spec = FhocpSpec(bench.model, bench.econ, aux, x0, N, pi_bound=warm.aux_value)
        rec = solve(spec, U)
        assert rec.feasible
        assert rec.econ_value <= warm.econ_value
        assert rec.aux_value <= spec.pi_bound * (1 + 1e-12)
        assert np.all(bench.model.input_lb <= rec.inputs) and np.all(rec.inputs <= bench.model.input_ub)


def test_warm_start_contract(scalar):
    aux = scalar.aux()
    spec = FhocpSpec(scalar.model, scalar.econ, aux, [1.9], 2, pi_bound=aux.feasible_bound(2))
    with pytest.raises(ContractViolation):
        solve(spec, np.ones((3, 1)))
    # driving away from the origin violates the filter bound
    with pytest.raises(ContractViolation):
        solve(FhocpSpec(scalar.model, scalar.econ, aux, [1.9], 2, pi_bound=1.0), [[1.0], [1.0]])


def test_solution_at_origin(scalar):
    rec = solve(FhocpSpec(scalar.model, scalar.econ, scalar.aux(), [0.0], 1, pi_bound=np.inf))
    assert rec.objective == pytest.approx(0.0, abs=1e-12)


def test_solver_is_deterministic(cstr):
    aux = cstr.aux()
    x0 = cstr.to_deviation(cstr.defaults["x0"])
    spec = FhocpSpec(cstr.model, cstr.econ, aux, x0, 3, objective_kind=AUXILIARY)
    a, b = solve(spec), solve(spec)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert a.objective == b.objective


def test_stabilizing_value_nonincreasing_in_horizon(cstr):
    aux = cstr.aux()
    ti = cstr.ti
    x0 = cstr.to_deviation(cstr.defaults["x0"])
    prev = None
    for N in range(1, 7):
        spec = FhocpSpec(cstr.model, cstr.econ, aux, x0, N, objective_kind=AUXILIARY)
        warm = None
        if prev is not None and ti.in_terminal_set(prev.states[-1]):
            warm = k_extend(cstr.model, ti, x0, prev.inputs, N)
        rec = stabilizing_value(spec, warm)
        if warm is not None:
            assert rec.aux_value <= prev.aux_value + 1e-9
        prev = rec


@pytest.mark.parametrize("plant", ["scalar", "cstr"])
def test_adjoint_gradients_match_finite_differences(benchmarks, plant):
    bench = benchmarks[plant]
    aux = bench.aux()
    x0 = bench.to_deviation(bench.defaults["x0"])
    spec = FhocpSpec(bench.model, bench.econ, aux, x0, 3)
    shoot = _Shooting(spec)
    rng = np.random.default_rng(0)
    z = shoot.to_z(feasible_random_inputs(bench.model, x0, 3, rng))
    for value, grad in ((shoot.econ, shoot.econ_grad), (shoot.aux, shoot.aux_grad)):
        g = grad(z)
        fd = np.empty_like(z)
        for j in range(z.size):
            e = np.zeros_like(z)
            e[j] = 1e-6
            fd[j] = (value(z + e) - value(z - e)) / 2e-6
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6 * max(1.0, np.max(np.abs(fd))))


def test_cold_starts_are_admissible_inputs(cstr):
    spec = FhocpSpec(cstr.model, cstr.econ, cstr.aux(), np.zeros(2), 4)
    starts = cold_starts(spec)
    assert len(starts) == 5
    for U in starts:
        assert U.shape == (4, 2)
        assert all(cstr.model.in_input_set(u) for u in U)


def test_spec_validation(scalar):
    aux = scalar.aux()
    for kwargs in (dict(horizon=0), dict(horizon=1.5), dict(pi_bound=np.nan), dict(objective_kind="x"),
                   dict(x0=[1.0, 2.0])):
        base = dict(model=scalar.model, econ=scalar.econ, aux=aux, x0=[0.0], horizon=2)
        base.update(kwargs)
        with pytest.raises(ContractViolation):
            FhocpSpec(**base)


@pytest.mark.parametrize("N", [1, 3])
def test_origin_hold_is_dominated(cstr, N):
    aux = cstr.aux()
    hold = np.zeros((N, 2))
    spec = FhocpSpec(cstr.model, cstr.econ, aux, np.zeros(2), N, pi_bound=aux.lam * cstr.ti.alpha)
    ref = evaluate_inputs(spec, hold)
    assert ref.feasible and ref.aux_value == pytest.approx(0.0, abs=1e-12)
    assert solve(spec, hold).econ_value <= ref.econ_value
    stab = stabilizing_value(dataclasses.replace(spec, objective_kind=AUXILIARY))
    assert stab.aux_value == pytest.approx(0.0, abs=1e-12)
