"""Closed-loop variable-horizon economic MPC with a convergence filter.

Each step solves the economic FHOCP under the current filter bound, applies
either the first optimal input or the local law, runs the selected iterative
process to obtain the minimal admissible horizon, updates the horizon, and
evaluates the next filter value together with a warm start that is feasible
for it.  Once the state reaches the small level set ``X_psi`` the controller
latches onto the local law.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import eigh

from .costs import AuxiliaryCost, EconomicCost, auxiliary_total, rollout
from .errors import (ContractViolation, InfeasibleProblem, InitializationError,
                     InternalInvariantError, NoEntryError)
from .filters import (CASE_A1, CASE_A2, CASE_TERMINAL, KINDS, PI1, FilterOutcome, FilterSpec,
                      HorizonSchedule, StepContext, first_entry_index, iterative_process,
                      k_extend, k_sequence, update_horizon)
from .model import SystemModel
from .ocp import AUXILIARY, ECONOMIC, FhocpSpec, SolveRecord, evaluate_inputs, solve

log = logging.getLogger(__name__)

CHECK_TOL = 1e-6
ORDER_TOL = 1e-8
TAU_SAMPLES = 100_000
TAU_SEED = 20240601


@dataclass(frozen=True)
class ControllerConfig:
    filter: FilterSpec
    schedule: HorizonSchedule = HorizonSchedule()
    N0: Optional[int] = None          # None: smallest admissible initial horizon
    max_steps: int = 200
    terminal_steps: int = 20          # steps to keep running after the latch engages
    record_all_filters: bool = False
    certify: bool = True
    max_reference_horizon: int = 60

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractViolation("max_steps must be positive")
        if self.N0 is not None and self.N0 < 1:
            raise ContractViolation("N0 must be positive")


# ----------------------------------------------------------- initial horizon

def reference_trajectory(model: SystemModel, econ: EconomicCost, aux: AuxiliaryCost, x0,
                         warm_start=None, max_horizon: int = 60) -> SolveRecord:
    """Input sequence steering ``x0`` into ``X_f`` at the shortest horizon found.

    The shortest horizon is searched with ``b = 0`` so that it does not depend
    on the auxiliary weight; the sequence is then re-optimised for ``aux``
    under the terminal constraint.  A ``warm_start`` (e.g. the reference of a
    neighbouring ``b``) skips the search and fixes the horizon.
    """
    ti = aux.ti
    x0 = np.asarray(x0, dtype=float)
    if not model.in_state_set(x0):
        raise InitializationError("initial state lies outside X")
    if ti.in_terminal_set(x0):
        spec = FhocpSpec(model, econ, aux, x0, 1, objective_kind=AUXILIARY)
        return evaluate_inputs(spec, k_sequence(model, ti, x0, 1))

    def spec_at(N, a):
        return FhocpSpec(model, econ, a, x0, N, objective_kind=AUXILIARY, terminal_constraint=True)

    if warm_start is not None:
        warm = np.asarray(warm_start, dtype=float).reshape(-1, model.input_dim)
        return solve(spec_at(len(warm), aux), warm)
    search_aux = AuxiliaryCost(ti=ti, d=aux.d, b=0.0, lam=aux.lam)
    for N in range(1, max_horizon + 1):
        try:
            rec = solve(spec_at(N, search_aux))
        except InfeasibleProblem:
            continue
        return solve(spec_at(N, aux), rec.inputs)
    raise InitializationError(f"no input sequence of length <= {max_horizon} reaches X_f from x0")


def min_initial_horizon(model: SystemModel, aux: AuxiliaryCost, x0, reference_inputs) -> int:
    """Smallest ``N0`` for which ``N0 d + lambda alpha`` bounds the reference cost."""
    ti = aux.ti
    traj = rollout(model, x0, reference_inputs)
    if not ti.in_terminal_set(traj.states[-1]):
        raise ContractViolation("reference inputs do not drive x0 into X_f")
    n_bar = traj.horizon
    ja = auxiliary_total(aux, traj)
    return max(int(math.ceil((ja - aux.lam * ti.alpha) / aux.d - 1e-9)), n_bar, 1)


# -------------------------------------------------------------- step record

@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    N: int
    case: str
    pi: float = np.nan
    Vae: float = np.nan
    Le: float = np.nan
    La: float = np.nan                # L_a at the applied input
    La_opt: float = np.nan            # L_a at u*_{0|k}
    solve_time: float = 0.0
    iterations: int = 0
    used_warm_start: bool = False
    fallback: bool = False
    N_tilde: int = 0
    N_next: int = 0
    pi_next: float = np.nan
    candidate_Ja: float = np.nan      # J_a of the local-law extended candidate at N_next
    warm_feasible: bool = True
    filters: Dict[str, dict] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return self.case == CASE_TERMINAL


class VHEMPController:
    """Stateful controller for the nominal closed loop starting at ``x0``."""

    def __init__(self, model: SystemModel, econ: EconomicCost, aux: AuxiliaryCost,
                 config: ControllerConfig, x0, reference: Optional[SolveRecord] = None):
        self.model, self.econ, self.aux, self.config = model, econ, aux, config
        self.ti = aux.ti
        x0 = np.asarray(x0, dtype=float)
        if not model.in_state_set(x0):
            raise InitializationError("initial state lies outside X")
        if reference is None:
            reference = reference_trajectory(model, econ, aux, x0,
                                             max_horizon=config.max_reference_horizon)
        self.reference = reference
        self.N_min = min_initial_horizon(model, aux, x0, reference.inputs)
        N0 = self.N_min if config.N0 is None else config.N0
        if N0 < self.N_min:
            raise InitializationError(f"N0={N0} is below the admissible minimum {self.N_min}")
        self.N0 = N0
        self.k = 0
        self.N = N0
        self.pi = aux.feasible_bound(N0)
        self.warm = k_extend(model, self.ti, x0, reference.inputs, N0)
        self.x_expected = x0
        self.latched = False

    # Lemma-2 style guard: any point with J_a <= pi <= N d + lambda alpha enters
    # X_f, so a miss can only come from solver tolerances
    def _entering(self, spec: FhocpSpec, rec: SolveRecord):
        try:
            first_entry_index(self.ti, rec.states)
            return rec, False
        except NoEntryError:
            pass
        log.warning("step %d: optimal trajectory misses X_f, falling back to the warm start", self.k)
        rec = evaluate_inputs(spec, self.warm)
        try:
            first_entry_index(self.ti, rec.states)
        except NoEntryError:
            raise InternalInvariantError(f"step {self.k}: warm start misses X_f (Lemma-2 fallback)")
        return rec, True

    def control_step(self, x_k) -> tuple:
        x_k = np.asarray(x_k, dtype=float)
        if not np.allclose(x_k, self.x_expected, rtol=0, atol=1e-9):
            raise ContractViolation("control_step expects the nominal successor state")
        model, ti, aux = self.model, self.ti, self.aux
        if self.latched or ti.in_psi_set(x_k):
            self.latched = True
            u = ti.control(x_k)
            rec = StepRecord(k=self.k, x=x_k, u=u, N=self.N, case=CASE_TERMINAL,
                             Le=self.econ(x_k, u), La=aux.stage(x_k, u), La_opt=aux.stage(x_k, u))
            self._advance(model.step(x_k, u))
            return u, rec

        spec = FhocpSpec(model, self.econ, aux, x_k, self.N, pi_bound=self.pi, objective_kind=ECONOMIC)
        t0 = time.perf_counter()
        sol = solve(spec, self.warm)
        solve_time = time.perf_counter() - t0
        sol, fallback = self._entering(spec, sol)

        later = any(ti.in_terminal_set(x) for x in sol.states[1:])
        case = CASE_A1 if ti.in_terminal_set(x_k) and not later else CASE_A2
        u = ti.control(x_k) if case == CASE_A1 else sol.inputs[0].copy()
        x_next = model.step(x_k, u)
        ctx = StepContext(model=model, econ=self.econ, aux=aux, x_k=x_k, x_next=x_next,
                          solution=sol, N_k=self.N, case=case, La0=aux.stage(x_k, u),
                          La0_opt=aux.stage(x_k, sol.inputs[0]))
        kind, kappa = self.config.filter.kind, self.config.filter.kappa
        outcome = iterative_process(kind, ctx, kappa, certify=self.config.certify)
        upsilon, sigma = self.config.schedule.at(self.k)
        N_next = update_horizon(outcome.N_tilde, self.N, upsilon, sigma)
        pi_next, warm_next = outcome.at(N_next)

        next_spec = FhocpSpec(model, self.econ, aux, x_next, N_next, pi_bound=pi_next)
        warm_rec = evaluate_inputs(next_spec, warm_next)
        rec = StepRecord(k=self.k, x=x_k, u=u, N=self.N, case=case, pi=self.pi, Vae=sol.aux_value,
                         Le=self.econ(x_k, u), La=ctx.La0, La_opt=ctx.La0_opt,
                         solve_time=solve_time, iterations=sol.iterations,
                         used_warm_start=sol.used_warm_start, fallback=fallback,
                         N_tilde=outcome.N_tilde, N_next=N_next, pi_next=pi_next,
                         candidate_Ja=outcome.candidate_Ja_at(N_next),
                         warm_feasible=bool(warm_rec.feasible))
        if self.config.record_all_filters:
            rec.filters = self._compare_filters(ctx, outcome, N_next)

        self.N, self.pi, self.warm = N_next, pi_next, warm_next
        self._advance(x_next)
        return u, rec

    def _compare_filters(self, ctx: StepContext, active: FilterOutcome, N_next: int) -> dict:
        """All three filters side by side at a common horizon."""
        kappa = self.config.filter.kappa
        outcomes = {active.kind: active}
        for kind in KINDS:
            if kind not in outcomes:
                outcomes[kind] = iterative_process(kind, ctx, kappa, certify=self.config.certify)
        common = max([N_next] + [o.N_tilde for o in outcomes.values()])
        extra = [o.candidate_at(common) for o in outcomes.values()]
        out = {}
        for kind in KINDS:
            o = outcomes[kind]
            if kind == PI1:
                value, _ = o.at(common, extra_warm=extra)
            else:
                value, _ = o.at(common)
            out[kind] = {"N_tilde": o.N_tilde, "N_common": common, "value": value}
        return out

    def _advance(self, x_next):
        self.k += 1
        self.x_expected = x_next


# -------------------------------------------------------------- certificate

@dataclass(frozen=True)
class TauEstimate:
    tau: float
    sampled: float
    analytic: float
    n_samples: int


def estimate_tau(model: SystemModel, aux: AuxiliaryCost, n_samples: int = TAU_SAMPLES,
                 seed: int = TAU_SEED) -> TauEstimate:
    """Lower bound of ``L_a`` over ``(X minus X_psi) x U``.

    Inside ``X_f`` the auxiliary cost is ``gamma0 >= mu V(x)`` with ``mu`` the
    smallest generalised eigenvalue of ``(gamma_Q, P)``, so the infimum is
    ``min(d, mu psi)``.  Uniform samples of ``X x U`` plus samples on the
    ``psi``-shell with zero input cross-check it; the smaller value is used.
    """
    ti = aux.ti
    rng = np.random.default_rng(seed)
    n, m = model.state_dim, model.input_dim
    X = rng.uniform(model.state_lb, model.state_ub, size=(n_samples, n))
    U = rng.uniform(model.input_lb, model.input_ub, size=(n_samples, m))
    n_shell = n_samples // 10
    dirs = rng.standard_normal((n_shell, n))
    v = np.einsum("ij,jk,ik->i", dirs, ti.P, dirs)
    shell = dirs * np.sqrt(ti.psi * (1 + 1e-9) / v)[:, None]
    X = np.vstack([X, shell])
    U = np.vstack([U, np.clip(np.zeros((n_shell, m)), model.input_lb, model.input_ub)])
    V = np.einsum("ij,jk,ik->i", X, ti.P, X)
    keep = V > ti.psi
    X, U, V = X[keep], U[keep], V[keep]
    inside = V <= ti.alpha
    la = np.where(inside,
                  np.einsum("ij,jk,ik->i", X, ti.gamma_Q, X) + np.einsum("ij,jk,ik->i", U, ti.gamma_R, U),
                  aux.d + aux.b * np.einsum("ij,ij->i", X, X))
    sampled = float(la.min())
    mu = float(eigh(ti.gamma_Q, ti.P, eigvals_only=True)[0])
    analytic = min(aux.d, mu * ti.psi)
    return TauEstimate(tau=min(sampled, analytic), sampled=sampled, analytic=analytic,
                       n_samples=int(len(X)))


@dataclass
class ConvergenceCertificate:
    S_psi_bound: float
    tau: float
    tau_sampled: float
    tau_analytic: float
    n_tau_samples: int
    chi_floor: str
    steps_to_psi: Optional[int]
    average_Le: float
    steady_Le: float
    N0: int
    kappa: float
    checks: Dict[str, Optional[int]] = field(default_factory=dict)   # name -> first failing step

    @property
    def violations(self) -> Dict[str, int]:
        return {name: k for name, k in self.checks.items() if k is not None}

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)


CHECK_DESCRIPTIONS = {
    "state_constraints": "x_k in X and u_k in U",
    "recursive_feasibility": "stored warm start feasible for the next FHOCP",
    "value_below_filter": "V_a^e(x_k) <= Pi_k",
    "filter_below_bound": "Pi_k <= N_k d + lambda alpha",
    "filter_decrease": "Pi_{k+1} <= Pi_k - kappa L_a(x_k, u_k)",
    "filter_decrease_tau": "Pi_{k+1} <= Pi_k - kappa tau outside X_psi",
    "candidate_decrease": "J_a(candidate) <= V_a^e(x_k) - L_a(x_k, u*_0)",
    "horizon_not_above_previous": "N_tilde_{k+1} <= N_k",
    "value_decrease": "V_a^e(x_{k+1}) <= Pi_k - kappa min(gamma0(x_k, u_k), d)",
    "filter_ordering": "Pi1 <= Pi2 <= Pi3 at a common horizon",
    "reach_time": "steps to X_psi <= S_psi",
    "terminal_invariance": "V(x_{k+1}) <= V(x_k) - gamma0(x_k, K x_k) and x in X_psi after the latch",
    "average_performance": "average L_e <= L_e(x_s, u_s) + 1e-3",
}


def certify(steps: List[StepRecord], model: SystemModel, aux: AuxiliaryCost, kappa: float,
            N0: int, steady_Le: float, tau: Optional[TauEstimate] = None) -> ConvergenceCertificate:
    """Evaluate every closed-loop invariant on a finished run."""
    ti = aux.ti
    tau = tau or estimate_tau(model, aux)
    S_psi = (N0 * aux.d + aux.lam * ti.alpha) / (kappa * tau.tau)
    tol = CHECK_TOL
    first: Dict[str, Optional[int]] = {name: None for name in CHECK_DESCRIPTIONS}

    def fail(name, k):
        if first[name] is None:
            first[name] = k

    psi_step = None
    for j, s in enumerate(steps):
        if not (model.in_state_set(s.x, tol=1e-7) and model.in_input_set(s.u)):
            fail("state_constraints", s.k)
        if psi_step is None and ti.in_psi_set(s.x):
            psi_step = s.k
        if s.terminal:
            if not ti.in_psi_set(s.x):
                fail("terminal_invariance", s.k)
            if j + 1 < len(steps) and (ti.lyapunov(steps[j + 1].x)
                                       > ti.lyapunov(s.x) - ti.gamma0(s.x, s.u) + 1e-9):
                fail("terminal_invariance", s.k)
            continue
        if not s.warm_feasible:
            fail("recursive_feasibility", s.k)
        if s.Vae > s.pi + tol:
            fail("value_below_filter", s.k)
        if s.pi > aux.feasible_bound(s.N) + tol:
            fail("filter_below_bound", s.k)
        if s.pi_next > s.pi - kappa * s.La + tol:
            fail("filter_decrease", s.k)
        if not ti.in_psi_set(s.x) and s.pi_next > s.pi - kappa * tau.tau + tol:
            fail("filter_decrease_tau", s.k)
        nxt = steps[j + 1] if j + 1 < len(steps) else None
        if nxt is not None and not nxt.terminal:
            chi = min(ti.gamma0(s.x, s.u), aux.d)
            if nxt.Vae > s.pi - kappa * chi + tol:
                fail("value_decrease", s.k)
        if s.candidate_Ja > s.Vae - s.La_opt + tol:
            fail("candidate_decrease", s.k)
        if s.N_tilde > s.N:
            fail("horizon_not_above_previous", s.k)
        if s.filters:
            v = [s.filters[kind]["value"] for kind in KINDS]
            if not (v[0] <= v[1] + ORDER_TOL and v[1] <= v[2] + ORDER_TOL):
                fail("filter_ordering", s.k)
            if any(f["N_tilde"] > s.N for f in s.filters.values()):
                fail("horizon_not_above_previous", s.k)
    if psi_step is None or psi_step > math.ceil(S_psi):
        first["reach_time"] = len(steps) if psi_step is None else psi_step
    average = float(np.mean([s.Le for s in steps]))
    if average > steady_Le + 1e-3:
        first["average_performance"] = len(steps)
    return ConvergenceCertificate(
        S_psi_bound=S_psi, tau=tau.tau, tau_sampled=tau.sampled, tau_analytic=tau.analytic,
        n_tau_samples=tau.n_samples, chi_floor="min(gamma0(x, u), d) outside X_psi",
        steps_to_psi=psi_step, average_Le=average, steady_Le=steady_Le, N0=N0, kappa=kappa,
        checks=first)


@dataclass
class ClosedLoopResult:
    steps: List[StepRecord]
    x_final: np.ndarray
    certificate: ConvergenceCertificate
    controller: VHEMPController

    @property
    def states(self) -> np.ndarray:
        return np.array([s.x for s in self.steps] + [self.x_final])

    @property
    def inputs(self) -> np.ndarray:
        return np.array([s.u for s in self.steps])


def run_closed_loop(model: SystemModel, econ: EconomicCost, aux: AuxiliaryCost,
                    config: ControllerConfig, x0, steady_Le: float = 0.0,
                    reference: Optional[SolveRecord] = None,
                    tau: Optional[TauEstimate] = None) -> ClosedLoopResult:
    """Simulate until ``max_steps`` or ``terminal_steps`` steps after the latch."""
    ctrl = VHEMPController(model, econ, aux, config, x0, reference)
    x = np.asarray(x0, dtype=float)
    steps = []
    n_terminal = 0
    for _ in range(config.max_steps):
        u, rec = ctrl.control_step(x)
        steps.append(rec)
        x = ctrl.x_expected
        n_terminal += rec.terminal
        if n_terminal >= config.terminal_steps:
            break
    cert = certify(steps, model, aux, config.filter.kappa, ctrl.N0, steady_Le, tau)
    return ClosedLoopResult(steps=steps, x_final=x, certificate=cert, controller=ctrl)


@dataclass(frozen=True)
class HorizonTableRow:
    b: float
    N0: int
    N_bar: int
    reference_Ja: float


def initial_horizon_table(model: SystemModel, econ: EconomicCost, aux: AuxiliaryCost, x0,
                          b_grid, max_horizon: int = 60) -> List[HorizonTableRow]:
    """Minimal initial horizon for each auxiliary weight in ``b_grid``.

    Weights are processed from large to small and each reference solve is
    warm-started with the previous one, so the reference cost (and ``N0``)
    cannot increase as ``b`` decreases.  Rows come back in grid order.
    """
    grid = [float(b) for b in b_grid]
    if not grid:
        raise ContractViolation("b grid must be nonempty")
    rows = {}
    prev = None
    for b in sorted(set(grid), reverse=True):
        aux_b = AuxiliaryCost(ti=aux.ti, d=aux.d, b=b, lam=aux.lam)
        ref = reference_trajectory(model, econ, aux_b, x0, warm_start=prev, max_horizon=max_horizon)
        prev = ref.inputs
        rows[b] = HorizonTableRow(b=b, N0=min_initial_horizon(model, aux_b, x0, ref.inputs),
                                  N_bar=ref.horizon, reference_Ja=ref.aux_value)
    return [rows[b] for b in grid]
