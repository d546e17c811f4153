"""Finite-horizon optimal control by single shooting.

The decision vector is the input sequence, rescaled to the unit box.  States
are eliminated by forward simulation; objective gradients come from an
adjoint sweep and state-constraint Jacobians from forward sensitivities.
SLSQP solves the resulting NLP.

Correctness does not rest on SLSQP: the returned point is re-evaluated
exactly, and whenever it is infeasible or no better than a supplied feasible
warm start, the warm start is returned verbatim.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .costs import AuxiliaryCost, EconomicCost, Trajectory, as_input_array, rollout
from .errors import ContractViolation, InfeasibleProblem, NumericFailure
from .model import SystemModel

ECONOMIC = "economic"
AUXILIARY = "auxiliary"

STATE_TOL = 1e-7       # accepted state-box violation of a returned solution
WARM_TOL = 1e-6        # precondition slack on a supplied warm start
PI_MARGIN = 1e-9       # relative tightening of the filter constraint inside the NLP
MAX_ITER = 100
PENALTY = 1e12
BLOWUP = 1e8


@dataclass(frozen=True, eq=False)
class FhocpSpec:
    model: SystemModel
    econ: EconomicCost
    aux: AuxiliaryCost
    x0: np.ndarray
    horizon: int
    pi_bound: float = np.inf
    objective_kind: str = ECONOMIC
    terminal_constraint: bool = False

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ContractViolation(f"horizon must be a positive integer, got {self.horizon}")
        if np.isnan(self.pi_bound) or self.pi_bound == -np.inf:
            raise ContractViolation("pi_bound must be finite or +inf")
        if self.objective_kind not in (ECONOMIC, AUXILIARY):
            raise ContractViolation(f"unknown objective kind {self.objective_kind!r}")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.model.state_dim,):
            raise ContractViolation("x0 dimension mismatch")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "horizon", int(self.horizon))


@dataclass(eq=False)
class SolveRecord:
    inputs: np.ndarray
    states: np.ndarray
    objective: float
    aux_value: float
    econ_value: float
    feasible: bool
    iterations: int
    solve_time: float
    used_warm_start: bool = False

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(states=self.states, inputs=self.inputs)

    @property
    def horizon(self) -> int:
        return len(self.inputs)


class _Shooting:
    """Cached single-shooting evaluations for one spec."""

    def __init__(self, spec: FhocpSpec):
        self.spec = spec
        m = spec.model
        self.n, self.m, self.N = m.state_dim, m.input_dim, spec.horizon
        self.u_lb = np.tile(m.input_lb, self.N)
        self.u_scale = np.tile(np.where(m.input_ub > m.input_lb, m.input_ub - m.input_lb, 1.0), self.N)
        self.x_scale = np.where(m.state_ub > m.state_lb, m.state_ub - m.state_lb, 1.0)
        self._key = None

    # z in [0, 1]^(N m)  <->  U of shape (N, m)
    def to_inputs(self, z):
        return (self.u_lb + self.u_scale * np.clip(z, 0.0, 1.0)).reshape(self.N, self.m)

    def to_z(self, U):
        return (np.asarray(U, dtype=float).reshape(-1) - self.u_lb) / self.u_scale

    def _eval(self, z):
        key = np.asarray(z, dtype=float).tobytes()
        if key == self._key:
            return
        U = self.to_inputs(z)
        model = self.spec.model
        X = np.empty((self.N + 1, self.n))
        A = np.empty((self.N, self.n, self.n))
        B = np.empty((self.N, self.n, self.m))
        X[0] = self.spec.x0
        self.valid = True
        try:
            with np.errstate(all="ignore"):
                for i in range(self.N):
                    X[i + 1], A[i], B[i] = model.step_with_jacobian(X[i], U[i])
                    if np.max(np.abs(X[i + 1])) > BLOWUP:
                        raise NumericFailure("state blow-up")
        except NumericFailure:
            # penalised point: SLSQP's line search backtracks away from it
            self.valid = False
        self._key, self.U, self.X, self.A, self.B = key, U, X, A, B
        self._sens = None

    def _adjoint(self, stage_grads, terminal_grad):
        """Gradient w.r.t. the flattened inputs of sum_i l(x_i, u_i) + phi(x_N)."""
        g = np.empty((self.N, self.m))
        lam = terminal_grad
        for i in range(self.N - 1, -1, -1):
            gx, gu = stage_grads[i]
            g[i] = gu + self.B[i].T @ lam
            lam = gx + self.A[i].T @ lam
        return g.reshape(-1) * self.u_scale

    def econ(self, z):
        self._eval(z)
        if not self.valid:
            return PENALTY
        e = self.spec.econ
        return float(sum(e(x, u) for x, u in zip(self.X[:-1], self.U)))

    def econ_grad(self, z):
        self._eval(z)
        if not self.valid:
            return np.zeros(self.N * self.m)
        e = self.spec.econ
        grads = [e.grad(x, u) for x, u in zip(self.X[:-1], self.U)]
        return self._adjoint(grads, np.zeros(self.n))

    def aux(self, z):
        self._eval(z)
        if not self.valid:
            return PENALTY
        a = self.spec.aux
        return float(sum(a.stage(x, u) for x, u in zip(self.X[:-1], self.U)) + a.terminal(self.X[-1]))

    def aux_grad(self, z):
        self._eval(z)
        if not self.valid:
            return np.zeros(self.N * self.m)
        a = self.spec.aux
        grads = [a.stage_grad(x, u) for x, u in zip(self.X[:-1], self.U)]
        return self._adjoint(grads, 2.0 * a.lam * a.ti.P @ self.X[-1])

    def sensitivities(self, z):
        """dx_i/dz for i = 1..N, shape (N, n, N m)."""
        self._eval(z)
        if not self.valid:
            return np.zeros((self.N, self.n, self.N * self.m))
        if self._sens is None:
            S = np.zeros((self.N, self.n, self.N * self.m))
            prev = np.zeros((self.n, self.N * self.m))
            for i in range(self.N):
                cur = self.A[i] @ prev
                cur[:, i * self.m:(i + 1) * self.m] += self.B[i]
                S[i] = cur
                prev = cur
            self._sens = S * self.u_scale
        return self._sens

    def state_cons(self, z):
        self._eval(z)
        if not self.valid:
            return np.full(2 * self.N * self.n, -1e3)
        lb, ub = self.spec.model.state_lb, self.spec.model.state_ub
        Xs = self.X[1:]
        return np.concatenate([((ub - Xs) / self.x_scale).ravel(),
                               ((Xs - lb) / self.x_scale).ravel()])

    def state_cons_jac(self, z):
        S = self.sensitivities(z) / self.x_scale[None, :, None]
        S = S.reshape(self.N * self.n, -1)
        return np.vstack([-S, S])


def _evaluate(spec: FhocpSpec, inputs) -> tuple:
    traj = rollout(spec.model, spec.x0, inputs)
    aux = spec.aux
    ja = float(sum(aux.stage(x, u) for x, u in zip(traj.states[:-1], traj.inputs))
               + aux.terminal(traj.states[-1]))
    je = float(sum(spec.econ(x, u) for x, u in zip(traj.states[:-1], traj.inputs)))
    if not (np.isfinite(ja) and np.isfinite(je)):
        raise NumericFailure("non-finite objective")
    return traj, ja, je


def _is_feasible(spec: FhocpSpec, traj: Trajectory, ja: float, state_tol=STATE_TOL, pi_tol=0.0):
    m = spec.model
    if np.any(traj.inputs < m.input_lb - 1e-12) or np.any(traj.inputs > m.input_ub + 1e-12):
        return False
    xs = traj.states[1:]
    if np.any(xs < m.state_lb - state_tol) or np.any(xs > m.state_ub + state_tol):
        return False
    if ja > spec.pi_bound + pi_tol:
        return False
    if spec.terminal_constraint and not spec.aux.ti.in_terminal_set(traj.states[-1]):
        return False
    return True


def _record(spec, traj, ja, je, feasible, iterations, elapsed, used_warm):
    objective = je if spec.objective_kind == ECONOMIC else ja
    return SolveRecord(inputs=traj.inputs.copy(), states=traj.states.copy(), objective=objective,
                       aux_value=ja, econ_value=je, feasible=feasible, iterations=iterations,
                       solve_time=elapsed, used_warm_start=used_warm)


def _run_slsqp(shoot: _Shooting, spec: FhocpSpec, z0, kind: str, pi_bound: float):
    fun, jac = (shoot.econ, shoot.econ_grad) if kind == ECONOMIC else (shoot.aux, shoot.aux_grad)
    cons = [{"type": "ineq", "fun": shoot.state_cons, "jac": shoot.state_cons_jac}]
    if np.isfinite(pi_bound):
        scale = max(1.0, abs(pi_bound))
        target = pi_bound - PI_MARGIN * scale
        cons.append({"type": "ineq",
                     "fun": lambda z: np.array([(target - shoot.aux(z)) / scale]),
                     "jac": lambda z: -shoot.aux_grad(z)[None, :] / scale})
    if spec.terminal_constraint:
        ti = spec.aux.ti
        target_v = ti.alpha * (1 - 1e-6)

        def term(z):
            shoot._eval(z)
            if not shoot.valid:
                return np.array([-1e3])
            return np.array([(target_v - ti.lyapunov(shoot.X[-1])) / ti.alpha])

        def term_jac(z):
            S_N = shoot.sensitivities(z)[-1]
            return (-(2.0 * ti.P @ shoot.X[-1]) @ S_N / ti.alpha)[None, :]

        cons.append({"type": "ineq", "fun": term, "jac": term_jac})
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("ignore")
        try:
            res = minimize(fun, z0, jac=jac, method="SLSQP", bounds=[(0.0, 1.0)] * z0.size,
                           constraints=cons, options={"maxiter": MAX_ITER, "ftol": 1e-10})
        except (NumericFailure, ValueError, OverflowError, np.linalg.LinAlgError):
            return None, 0
    if not np.all(np.isfinite(res.x)):
        return None, int(res.nit)
    return np.clip(res.x, 0.0, 1.0), int(res.nit)


def solve(spec: FhocpSpec, warm_start=None) -> SolveRecord:
    """Minimise the selected objective subject to boxes and ``J_a <= pi_bound``.

    With a feasible warm start the result is never worse than it.  Without
    one, a feasibility phase minimises ``J_a`` from each of a fixed set of
    initial guesses (see :func:`cold_starts`); every feasible point found
    then seeds the main phase and the best result is returned.
    """
    t0 = time.perf_counter()
    shoot = _Shooting(spec)
    iterations = 0

    if warm_start is not None:
        U_w = as_input_array(spec.model, warm_start)
        if len(U_w) != spec.horizon:
            raise ContractViolation(f"warm start has length {len(U_w)}, horizon is {spec.horizon}")
        traj_w, ja_w, je_w = _evaluate(spec, U_w)
        if not _is_feasible(spec, traj_w, ja_w, state_tol=WARM_TOL, pi_tol=WARM_TOL):
            raise ContractViolation(
                f"warm start infeasible (J_a={ja_w:.6g}, bound={spec.pi_bound:.6g})")
    else:
        best = None
        for U0 in cold_starts(spec):
            point = _feasible_point(spec, U0)
            if point is None:
                z, it = _run_slsqp(shoot, spec, shoot.to_z(U0), AUXILIARY, np.inf)
                iterations += it
                point = None if z is None else _feasible_point(spec, shoot.to_inputs(z))
            if point is None:
                continue
            cand = _descend(shoot, spec, *point)
            iterations += cand[-1]
            if best is None or _objective(spec, cand[2], cand[3]) < _objective(spec, best[2], best[3]):
                best = cand
        if best is None:
            raise InfeasibleProblem("feasibility phase found no point satisfying the constraints")
        U, traj, ja, je, _ = best
        return _record(spec, traj, ja, je, True, iterations, time.perf_counter() - t0, False)

    U, traj, ja, je, it = _descend(shoot, spec, U_w, traj_w, ja_w, je_w)
    iterations += it
    return _record(spec, traj, ja, je, True, iterations, time.perf_counter() - t0, U is U_w)


def _feasible_point(spec: FhocpSpec, U):
    try:
        traj, ja, je = _evaluate(spec, U)
    except NumericFailure:
        return None
    return (U, traj, ja, je) if _is_feasible(spec, traj, ja) else None


def _objective(spec: FhocpSpec, ja: float, je: float) -> float:
    return je if spec.objective_kind == ECONOMIC else ja


def _descend(shoot: _Shooting, spec: FhocpSpec, U_w, traj_w, ja_w, je_w):
    """Main phase from a feasible point; returns the point itself unless SLSQP improves it."""
    pi = spec.pi_bound if spec.objective_kind == ECONOMIC else np.inf
    z, it = _run_slsqp(shoot, spec, shoot.to_z(U_w), spec.objective_kind, pi)
    if z is not None:
        U = shoot.to_inputs(z)
        try:
            traj, ja, je = _evaluate(spec, U)
        except NumericFailure:
            traj = None
        if (traj is not None and _is_feasible(spec, traj, ja)
                and _objective(spec, ja, je) <= _objective(spec, ja_w, je_w)):
            return U, traj, ja, je, it
    return U_w, traj_w, ja_w, je_w, it


def cold_starts(spec: FhocpSpec):
    """Deterministic initial guesses for a solve without warm start.

    The origin hold (zero inputs in deviation coordinates, clipped into U),
    both input bounds, and the two sequences alternating between the bounds.
    """
    m = spec.model
    N = spec.horizon
    lo, hi = np.tile(m.input_lb, (N, 1)), np.tile(m.input_ub, (N, 1))
    alt = (np.arange(N) % 2 == 0)[:, None]
    return [m.clip_input(np.zeros((N, m.input_dim))), lo, hi,
            np.where(alt, lo, hi), np.where(alt, hi, lo)]


def stabilizing_value(spec: FhocpSpec, warm_start=None) -> SolveRecord:
    """Auxiliary-objective solve; ``feasible`` reports whether ``V_a* <= pi_bound``."""
    if spec.objective_kind != AUXILIARY:
        spec = FhocpSpec(model=spec.model, econ=spec.econ, aux=spec.aux, x0=spec.x0,
                         horizon=spec.horizon, pi_bound=spec.pi_bound, objective_kind=AUXILIARY,
                         terminal_constraint=spec.terminal_constraint)
    relaxed = FhocpSpec(model=spec.model, econ=spec.econ, aux=spec.aux, x0=spec.x0,
                        horizon=spec.horizon, pi_bound=np.inf, objective_kind=AUXILIARY,
                        terminal_constraint=spec.terminal_constraint)
    rec = solve(relaxed, warm_start)
    rec.feasible = bool(rec.aux_value <= spec.pi_bound)
    return rec


def evaluate_inputs(spec: FhocpSpec, inputs) -> SolveRecord:
    """Wrap a given input sequence as a record (no optimisation)."""
    traj, ja, je = _evaluate(spec, inputs)
    return _record(spec, traj, ja, je, _is_feasible(spec, traj, ja), 0, 0.0, True)
