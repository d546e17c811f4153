"""Convergence filters, candidate sequences and the horizon update law.

Three filter constructions bound the auxiliary cost of the next FHOCP:

* ``pi1``: convex blend of the previous auxiliary value and the optimal
  stabilizing value at the next state (needs one extra solve per scanned
  horizon);
* ``pi2``: the same blend with the auxiliary cost of a constructed candidate
  sequence instead of the optimum;
* ``pi3``: previous auxiliary value minus ``kappa`` times the first stage
  cost; independent of the horizon.

:func:`iterative_process` scans horizons upward from the first terminal-set
entry and returns the minimal accepted horizon plus a :class:`FilterOutcome`
that evaluates the filter at any horizon at or beyond it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .costs import AuxiliaryCost, EconomicCost, feasible_bound  # noqa: F401  (re-export)
from .errors import ContractViolation, InternalInvariantError, NoEntryError
from .model import SystemModel
from .ocp import AUXILIARY, FhocpSpec, SolveRecord, evaluate_inputs, stabilizing_value
from .terminal import TerminalIngredients

PI1, PI2, PI3 = "Pi1", "Pi2", "Pi3"
KINDS = (PI1, PI2, PI3)
ACCEPT_TOL = 1e-6
CERTIFY_TOL = 1e-9     # slack of the candidate decrease test (keeps filter ordering tight)

CASE_A1, CASE_A2, CASE_TERMINAL = "A1", "A2", "terminal"


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    kappa: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"filter kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 < self.kappa <= 1:
            raise ContractViolation(f"kappa must lie in (0, 1], got {self.kappa}")


@dataclass(frozen=True)
class HorizonSchedule:
    """Per-step horizon-law parameters; shorter sequences are cycled."""

    upsilon: Tuple[float, ...] = (1.0,)
    sigma: Tuple[int, ...] = (0,)

    def __post_init__(self):
        ups = tuple(float(v) for v in np.atleast_1d(self.upsilon))
        sig = tuple(int(v) for v in np.atleast_1d(self.sigma))
        if not ups or not sig:
            raise ContractViolation("schedule sequences must be nonempty")
        if any(not 0 <= v <= 1 for v in ups):
            raise ContractViolation("upsilon values must lie in [0, 1]")
        if any(v < 0 for v in sig):
            raise ContractViolation("sigma values must be nonnegative integers")
        object.__setattr__(self, "upsilon", ups)
        object.__setattr__(self, "sigma", sig)

    def at(self, k: int) -> Tuple[float, int]:
        return self.upsilon[k % len(self.upsilon)], self.sigma[k % len(self.sigma)]


# ----------------------------------------------------------- entry indices

def first_entry_index(ti: TerminalIngredients, states) -> int:
    for i, x in enumerate(states):
        if ti.in_terminal_set(x):
            return i
    raise NoEntryError("predicted trajectory never enters the terminal set")


def last_entry_index(ti: TerminalIngredients, states, N_next: int, first: int) -> int:
    N = len(states) - 1
    if N_next < first:
        raise ContractViolation(f"N_next={N_next} is below the first entry index {first}")
    for i in range(min(N_next, N), first - 1, -1):
        if ti.in_terminal_set(states[i]):
            return i
    raise ContractViolation("no terminal-set entry in the requested index range")


# ------------------------------------------------------------- candidates

def k_sequence(model: SystemModel, ti: TerminalIngredients, x, length: int) -> np.ndarray:
    """Inputs of ``length`` steps of the local law starting from ``x``."""
    inputs = np.empty((length, model.input_dim))
    x = np.asarray(x, dtype=float)
    for i in range(length):
        inputs[i] = ti.control(x)
        x = model.step(x, inputs[i])
    return inputs


def k_extend(model: SystemModel, ti: TerminalIngredients, x0, inputs, length: int) -> np.ndarray:
    """Append local-law inputs to ``inputs`` until it has ``length`` elements."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.input_dim)
    if length < len(inputs):
        raise ContractViolation("cannot K-extend to a shorter horizon")
    if length == len(inputs):
        return inputs.copy()
    x = np.asarray(x0, dtype=float)
    for u in inputs:
        x = model.step(x, u)
    return np.vstack([inputs, k_sequence(model, ti, x, length - len(inputs))])


def candidate_a1(model: SystemModel, ti: TerminalIngredients, x_next, N_next: int) -> np.ndarray:
    if N_next < 1:
        raise ContractViolation("N_next must be >= 1")
    if not ti.in_terminal_set(x_next):
        raise ContractViolation("case A.1 candidate needs x_next inside the terminal set")
    return k_sequence(model, ti, x_next, N_next)


def candidate_a2(model: SystemModel, ti: TerminalIngredients, prev: SolveRecord, x_next,
                 N_next: int) -> np.ndarray:
    """Shifted optimal tail up to the last entry index, then the local law.

    The shift keeps ``u*_1 .. u*_{p-1}`` where ``p`` is the last entry index
    among ``1 .. min(N_next, N)``; the local law takes over from the state
    reached after the shifted part (``x*_p``, inside the terminal set).
    """
    states = prev.states
    first = max(first_entry_index(ti, states), 1)
    if N_next < first:
        raise ContractViolation(f"N_next={N_next} below first entry index {first}")
    p = last_entry_index(ti, states, N_next, first)
    shifted = prev.inputs[1:p]
    return k_extend(model, ti, x_next, shifted, N_next) if len(shifted) else \
        k_sequence(model, ti, x_next, N_next)


# -------------------------------------------------------------- filters

def pi1(prev_Vae: float, Vastar_next: float, kappa: float) -> float:
    return (1.0 - kappa) * prev_Vae + kappa * Vastar_next


def pi2(prev_Vae: float, Ja_candidate: float, kappa: float) -> float:
    return (1.0 - kappa) * prev_Vae + kappa * Ja_candidate


def pi3(prev_Vae: float, prev_La0: float, kappa: float) -> float:
    return prev_Vae - kappa * prev_La0


def update_horizon(N_tilde: int, N_k: int, upsilon: float, sigma: int) -> int:
    blend = N_tilde * upsilon + (1.0 - upsilon) * N_k
    return max(int(math.ceil(blend - 1e-9)) + int(sigma), 1)


# ---------------------------------------------------------- step context

@dataclass(eq=False)
class StepContext:
    """Everything the iterative processes need from time ``k``."""

    model: SystemModel
    econ: EconomicCost
    aux: AuxiliaryCost
    x_k: np.ndarray
    x_next: np.ndarray
    solution: SolveRecord
    N_k: int
    case: str
    La0: float                      # stage auxiliary cost of the applied input
    La0_opt: float                  # stage auxiliary cost of u*_{0|k}

    @property
    def ti(self) -> TerminalIngredients:
        return self.aux.ti

    @property
    def Vae(self) -> float:
        return self.solution.aux_value

    @property
    def decrease_target(self) -> float:
        return self.Vae - max(self.La0, self.La0_opt)

    def first_entry(self) -> int:
        return first_entry_index(self.ti, self.solution.states)

    def candidate(self, N: int) -> Optional[np.ndarray]:
        """Candidate sequence of length ``N``, or None when none can be built."""
        if self.case == CASE_A1:
            return candidate_a1(self.model, self.ti, self.x_next, N)
        try:
            return candidate_a2(self.model, self.ti, self.solution, self.x_next, N)
        except ContractViolation:
            return None

    def spec(self, N: int, pi_bound: float = np.inf) -> FhocpSpec:
        return FhocpSpec(model=self.model, econ=self.econ, aux=self.aux, x0=self.x_next,
                         horizon=N, pi_bound=pi_bound, objective_kind=AUXILIARY)

    def evaluate(self, inputs) -> SolveRecord:
        return evaluate_inputs(self.spec(len(inputs)), inputs)


@dataclass
class ScanEntry:
    i: int
    candidate_Ja: float
    pi: float
    Vastar: float
    accepted: bool


@dataclass(eq=False)
class FilterOutcome:
    kind: str
    kappa: float
    ctx: StepContext
    N_tilde: int
    candidate: np.ndarray               # accepted candidate at N_tilde
    candidate_Ja: float
    pi_tilde: float
    stabilizing: Optional[SolveRecord] = None   # Pi1 only
    scan: List[ScanEntry] = field(default_factory=list)
    _cache: Dict[int, Tuple[float, np.ndarray, float]] = field(default_factory=dict)

    def candidate_at(self, N: int) -> np.ndarray:
        """Local-law extension of the accepted candidate to horizon ``N``."""
        c = self.ctx
        return k_extend(c.model, c.ti, c.x_next, self.candidate, N)

    def at(self, N: int, extra_warm: Sequence[np.ndarray] = ()) -> Tuple[float, np.ndarray]:
        """Filter value at ``N >= N_tilde`` and a warm start feasible for it."""
        if N < self.N_tilde:
            raise ContractViolation(f"N={N} below the accepted horizon {self.N_tilde}")
        if N in self._cache and not extra_warm:
            value, warm, _ = self._cache[N]
            return value, warm
        c = self.ctx
        cand = self.candidate_at(N)
        cand_Ja = c.evaluate(cand).aux_value
        if self.kind == PI3:
            value, warm = pi3(c.Vae, c.La0, self.kappa), cand
        elif self.kind == PI2:
            value, warm = pi2(c.Vae, cand_Ja, self.kappa), cand
        else:
            starts = [cand] + [np.asarray(w) for w in extra_warm]
            if N == self.N_tilde:
                starts.append(self.stabilizing.inputs)
            elif c.ti.in_terminal_set(self.stabilizing.states[-1]):
                starts.append(k_extend(c.model, c.ti, c.x_next, self.stabilizing.inputs, N))
            best = min(starts, key=lambda u: c.evaluate(u).aux_value)
            rec = stabilizing_value(c.spec(N), best)
            value, warm = pi1(c.Vae, rec.aux_value, self.kappa), rec.inputs
        self._cache[N] = (value, warm, cand_Ja)
        return value, warm

    def candidate_Ja_at(self, N: int) -> float:
        self.at(N)
        return self._cache[N][2]


def iterative_process(kind: str, ctx: StepContext, kappa: float, certify: bool = True) -> FilterOutcome:
    """Minimal accepted horizon for the chosen filter construction.

    With ``certify`` the scan only accepts horizons whose candidate shows the
    one-step decrease ``J_a(cand) <= V_a^e - L_a(x_k, u_k)`` and whose
    candidate-based filter respects the horizon bound.  Both hold at
    ``i = N_k`` by construction, so the scan still terminates there at the
    latest.
    """
    FilterSpec(kind, kappa)
    aux = ctx.aux
    start = max(ctx.first_entry(), 1)
    scan = []
    for i in range(start, ctx.N_k + 1):
        bound = aux.feasible_bound(i) + ACCEPT_TOL
        cand = ctx.candidate(i)
        if cand is None:
            if certify or kind != PI3:
                continue
            cand_Ja = np.nan
        else:
            cand_Ja = ctx.evaluate(cand).aux_value
        if certify:
            if not (cand_Ja <= ctx.decrease_target + CERTIFY_TOL
                    and pi2(ctx.Vae, cand_Ja, kappa) <= bound):
                scan.append(ScanEntry(i, cand_Ja, np.nan, np.nan, False))
                continue
        stab = None
        vastar = np.nan
        if kind == PI3:
            value = pi3(ctx.Vae, ctx.La0, kappa)
            ok = value <= bound
        elif kind == PI2:
            value = pi2(ctx.Vae, cand_Ja, kappa)
            ok = cand_Ja <= value + ACCEPT_TOL and value <= bound
        else:
            stab = stabilizing_value(ctx.spec(i), cand)
            vastar = stab.aux_value
            value = pi1(ctx.Vae, vastar, kappa)
            ok = vastar <= value + ACCEPT_TOL and value <= bound
        scan.append(ScanEntry(i, cand_Ja, value, vastar, ok))
        if ok:
            if cand is None:
                cand = ctx.candidate(ctx.N_k)
                cand_Ja = ctx.evaluate(cand).aux_value if cand is not None else np.nan
            return FilterOutcome(kind=kind, kappa=kappa, ctx=ctx, N_tilde=i, candidate=cand,
                                 candidate_Ja=cand_Ja, pi_tilde=value, stabilizing=stab, scan=scan)
    raise InternalInvariantError(
        f"{kind} scan over {start}..{ctx.N_k} accepted no horizon (solver tolerance issue)")


def p3_closed_form(ctx: StepContext, kappa: float) -> int:
    """Smallest horizon accepted by the uncertified ``Pi3`` scan, by direct inversion."""
    aux = ctx.aux
    value = pi3(ctx.Vae, ctx.La0, kappa)
    need = math.ceil((value - aux.lam * aux.ti.alpha - ACCEPT_TOL) / aux.d - 1e-12)
    return max(need, max(ctx.first_entry(), 1), 1)
