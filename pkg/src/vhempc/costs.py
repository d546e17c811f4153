"""Economic and auxiliary stage costs, horizon sums and rollouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, NumericFailure
from .model import SystemModel
from .terminal import TerminalIngredients


@dataclass(frozen=True, eq=False)
class EconomicCost:
    """Stage cost ``L_e(x, u)``; may be negative and indefinite.

    ``gradient(x, u)`` returns ``(dL/dx, dL/du)``; when absent, central
    differences are used.
    """

    evaluate: Callable[[np.ndarray, np.ndarray], float]
    gradient: Optional[Callable] = None

    def __call__(self, x, u) -> float:
        return float(self.evaluate(x, u))

    def grad(self, x, u):
        if self.gradient is not None:
            gx, gu = self.gradient(x, u)
            return np.asarray(gx, dtype=float), np.asarray(gu, dtype=float)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return _fd_grad(lambda z: self.evaluate(z, u), x), _fd_grad(lambda v: self.evaluate(x, v), u)


def _fd_grad(fun, z, rel_step=1e-6):
    g = np.empty(z.size)
    for j in range(z.size):
        h = rel_step * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        g[j] = (fun(zp) - fun(zm)) / (2 * h)
    return g


def shift_economic(econ: EconomicCost, x_s, u_s) -> EconomicCost:
    """Compose ``L_e`` with the deviation-coordinate shift."""
    x_s = np.asarray(x_s, dtype=float)
    u_s = np.asarray(u_s, dtype=float)
    ev, gr = econ.evaluate, econ.gradient

    def evaluate(x, u):
        return ev(np.asarray(x) + x_s, np.asarray(u) + u_s)

    gradient = None
    if gr is not None:
        def gradient(x, u):
            return gr(np.asarray(x) + x_s, np.asarray(u) + u_s)

    return EconomicCost(evaluate=evaluate, gradient=gradient)


@dataclass(frozen=True, eq=False)
class AuxiliaryCost:
    """Piecewise auxiliary cost: ``gamma0`` inside ``X_f``, ``d + b|x|^2`` outside."""

    ti: TerminalIngredients
    d: float
    b: float
    lam: float

    def __post_init__(self):
        if not self.d > 0:
            raise ContractViolation("d must be positive")
        if self.b < 0:
            raise ContractViolation("b must be nonnegative")
        if self.lam < 1:
            raise ContractViolation("lambda must be >= 1")

    def stage(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        if self.ti.in_terminal_set(x):
            return self.ti.gamma0(x, u)
        return float(self.d + self.b * (x @ x))

    def stage_grad(self, x, u):
        """Gradient of the active branch (the cost jumps across ``X_f``'s boundary)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.ti.in_terminal_set(x):
            return 2 * self.ti.gamma_Q @ x, 2 * self.ti.gamma_R @ u
        return 2 * self.b * x, np.zeros_like(u)

    def terminal(self, x) -> float:
        return self.lam * self.ti.lyapunov(x)

    def feasible_bound(self, N: int) -> float:
        """Largest admissible filter value at horizon ``N``: ``N d + lambda alpha``."""
        return N * self.d + self.lam * self.ti.alpha


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray   # (N+1, n)
    inputs: np.ndarray   # (N, m)

    @property
    def horizon(self) -> int:
        return len(self.inputs)


def as_input_array(model: SystemModel, inputs) -> np.ndarray:
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1 and model.input_dim == 1:
        u = u.reshape(-1, 1)
    if u.ndim != 2 or u.shape[1] != model.input_dim:
        raise ContractViolation(f"inputs must have shape (N, {model.input_dim}), got {u.shape}")
    if len(u) == 0:
        raise ContractViolation("input sequence must be nonempty")
    return u


def rollout(model: SystemModel, x0, inputs) -> Trajectory:
    """Forward simulation; no constraint enforcement."""
    u = as_input_array(model, inputs)
    states = np.empty((len(u) + 1, model.state_dim))
    states[0] = np.asarray(x0, dtype=float)
    for i, ui in enumerate(u):
        states[i + 1] = model.step(states[i], ui)
    if not np.all(np.isfinite(states)):
        raise NumericFailure("non-finite state in rollout")
    return Trajectory(states=states, inputs=u)


def economic_total(econ: EconomicCost, traj: Trajectory) -> float:
    return float(sum(econ(x, u) for x, u in zip(traj.states[:-1], traj.inputs)))


def auxiliary_stage(aux: AuxiliaryCost, x, u) -> float:
    return aux.stage(x, u)


def auxiliary_total(aux: AuxiliaryCost, traj: Trajectory) -> float:
    stages = sum(aux.stage(x, u) for x, u in zip(traj.states[:-1], traj.inputs))
    return float(stages + aux.terminal(traj.states[-1]))


def feasible_bound(N: int, aux: AuxiliaryCost) -> float:
    return aux.feasible_bound(N)
