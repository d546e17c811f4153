"""Discrete-time plant abstraction, RK4 discretisation and steady states.

A :class:`SystemModel` is a frozen bundle of a one-step map ``f(x, u)`` and
the box constraints ``X`` and ``U``.  Plants given as ODEs are discretised by
fixed-step RK4 (:func:`rk4_discretize`).  The optional ``sensitivity`` hook
returns ``(f(x, u), df/dx, df/du)`` in one call so the shooting solver can
propagate derivatives without finite differences.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .errors import ContractViolation, InfeasibleModelError, NumericFailure

SET_TOL = 1e-9

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]
Sensitivity = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Discrete-time plant ``x+ = f(x, u)`` with compact boxes ``X`` and ``U``."""

    state_dim: int
    input_dim: int
    dynamics: Dynamics
    state_lb: np.ndarray
    state_ub: np.ndarray
    input_lb: np.ndarray
    input_ub: np.ndarray
    sample_time: Optional[float] = None
    sensitivity: Optional[Sensitivity] = None
    name: str = "plant"
    state_names: tuple = field(default=())
    input_names: tuple = field(default=())

    def __post_init__(self):
        for attr, dim in (("state_lb", self.state_dim), ("state_ub", self.state_dim),
                          ("input_lb", self.input_dim), ("input_ub", self.input_dim)):
            arr = np.asarray(getattr(self, attr), dtype=float).reshape(-1)
            if arr.shape != (dim,):
                raise ContractViolation(f"{attr} must have length {dim}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"{attr} must be finite (compact boxes)")
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        if np.any(self.state_lb > self.state_ub) or np.any(self.input_lb > self.input_ub):
            raise ContractViolation("empty box: lower bound exceeds upper bound")
        if self.sample_time is not None and not self.sample_time > 0:
            raise ContractViolation("sample_time must be positive")
        if not self.state_names:
            object.__setattr__(self, "state_names",
                               tuple(f"x{i}" for i in range(self.state_dim)))
        if not self.input_names:
            object.__setattr__(self, "input_names",
                               tuple(f"u{i}" for i in range(self.input_dim)))

    def _check(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if x.shape != (self.state_dim,):
            raise ContractViolation(f"state has shape {x.shape}, expected ({self.state_dim},)")
        if u.shape != (self.input_dim,):
            raise ContractViolation(f"input has shape {u.shape}, expected ({self.input_dim},)")
        return x, u

    def step(self, x, u) -> np.ndarray:
        """One application of ``f``; no constraint checking."""
        x, u = self._check(x, u)
        try:
            x_next = np.asarray(self.dynamics(x, u), dtype=float)
        except (OverflowError, ZeroDivisionError, ValueError) as exc:
            raise NumericFailure(f"dynamics failed at x={x}, u={u}: {exc}") from exc
        if not np.all(np.isfinite(x_next)):
            raise NumericFailure(f"non-finite successor state {x_next} from x={x}, u={u}")
        return x_next

    def step_with_jacobian(self, x, u):
        """Return ``(f(x, u), A, B)`` with ``A = df/dx`` and ``B = df/du``.

        Falls back to central differences when no analytic sensitivity is set.
        """
        x, u = self._check(x, u)
        try:
            if self.sensitivity is not None:
                x_next, A, B = self.sensitivity(x, u)
                x_next = np.asarray(x_next, dtype=float)
            else:
                x_next = np.asarray(self.dynamics(x, u), dtype=float)
                A = _central_jacobian(lambda z: self.dynamics(z, u), x)
                B = _central_jacobian(lambda v: self.dynamics(x, v), u)
        except (OverflowError, ZeroDivisionError, ValueError) as exc:
            raise NumericFailure(f"dynamics failed at x={x}, u={u}: {exc}") from exc
        if not np.all(np.isfinite(x_next)):
            raise NumericFailure(f"non-finite successor state {x_next} from x={x}, u={u}")
        return x_next, np.asarray(A, dtype=float), np.asarray(B, dtype=float)

    def in_state_set(self, x, tol: float = SET_TOL) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.state_dim,):
            raise ContractViolation("state dimension mismatch")
        return bool(np.all(x >= self.state_lb - tol) and np.all(x <= self.state_ub + tol))

    def in_input_set(self, u, tol: float = SET_TOL) -> bool:
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape != (self.input_dim,):
            raise ContractViolation("input dimension mismatch")
        return bool(np.all(u >= self.input_lb - tol) and np.all(u <= self.input_ub + tol))

    def clip_input(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.input_lb, self.input_ub)


def step(model: SystemModel, x, u) -> np.ndarray:
    return model.step(x, u)


def in_state_set(model: SystemModel, x) -> bool:
    return model.in_state_set(x)


def in_input_set(model: SystemModel, u) -> bool:
    return model.in_input_set(u)


def _central_jacobian(fun, z, rel_step=1e-6):
    z = np.asarray(z, dtype=float)
    f0 = np.asarray(fun(z), dtype=float)
    J = np.empty((f0.size, z.size))
    for j in range(z.size):
        h = rel_step * max(1.0, abs(z[j]))
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        J[:, j] = (np.asarray(fun(zp)) - np.asarray(fun(zm))) / (2 * h)
    return J


# --------------------------------------------------------------------------- RK4

def rk4_discretize(ode, h: float, substeps: int = 1, ode_jacobian=None):
    """Build ``(dynamics, sensitivity)`` for fixed-step RK4 over one period ``h``.

    ``ode(x, u)`` returns the time derivative; ``ode_jacobian(x, u)`` returns
    ``(dfdx, dfdu)`` of the vector field.  The sensitivity differentiates the
    RK4 stages exactly, so it is the Jacobian of the discrete map itself.
    """
    if substeps < 1:
        raise ContractViolation("substeps must be >= 1")
    dt = h / substeps

    def dynamics(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        for _ in range(substeps):
            k1 = ode(x, u)
            k2 = ode(x + 0.5 * dt * k1, u)
            k3 = ode(x + 0.5 * dt * k2, u)
            k4 = ode(x + dt * k3, u)
            x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    if ode_jacobian is None:
        return dynamics, None

    def sensitivity(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n, m = x.size, u.size
        A = np.eye(n)
        B = np.zeros((n, m))
        for _ in range(substeps):
            # stage derivatives w.r.t. the substep's initial state and the input
            k1 = ode(x, u)
            J1x, J1u = ode_jacobian(x, u)
            x2 = x + 0.5 * dt * k1
            k2 = ode(x2, u)
            J2x, J2u = ode_jacobian(x2, u)
            x3 = x + 0.5 * dt * k2
            k3 = ode(x3, u)
            J3x, J3u = ode_jacobian(x3, u)
            x4 = x + dt * k3
            k4 = ode(x4, u)
            J4x, J4u = ode_jacobian(x4, u)

            dk1x, dk1u = J1x, J1u
            dk2x = J2x @ (np.eye(n) + 0.5 * dt * dk1x)
            dk2u = J2x @ (0.5 * dt * dk1u) + J2u
            dk3x = J3x @ (np.eye(n) + 0.5 * dt * dk2x)
            dk3u = J3x @ (0.5 * dt * dk2u) + J3u
            dk4x = J4x @ (np.eye(n) + dt * dk3x)
            dk4u = J4x @ (dt * dk3u) + J4u
            Sx = np.eye(n) + (dt / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
            Su = (dt / 6.0) * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
            x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            A = Sx @ A
            B = Sx @ B + Su
        return x, A, B

    return dynamics, sensitivity


# ------------------------------------------------------------------ steady state

@dataclass(frozen=True, eq=False)
class SteadyState:
    x_s: np.ndarray
    u_s: np.ndarray
    value: float


def _newton_fixed_point(model: SystemModel, x, u, iters=30, tol=1e-12):
    """Solve ``f(x, u) = x`` for ``x`` with ``u`` held fixed."""
    with np.errstate(all="ignore"):
        return _newton_loop(model, x, u, iters, tol)


def _newton_loop(model, x, u, iters, tol):
    n = model.state_dim
    for _ in range(iters):
        try:
            fx, A, _ = model.step_with_jacobian(x, u)
        except NumericFailure:
            return None
        r = fx - x
        if np.linalg.norm(r) <= tol * max(1.0, np.linalg.norm(x)):
            return x
        try:
            dx = np.linalg.solve(A - np.eye(n), -r)
        except np.linalg.LinAlgError:
            return None
        x = x + dx
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e8:
            return None
    try:
        fx = model.step(x, u)
    except NumericFailure:
        return None
    if np.all(np.isfinite(fx)) and np.linalg.norm(fx - x) <= 1e-10 * max(1.0, np.linalg.norm(x)):
        return x
    return None


def find_steady_state(model: SystemModel, econ, input_points: int = 21,
                      state_points: int = 3, n_polish: int = 10) -> SteadyState:
    """Economically optimal fixed point of ``f`` inside ``X x U``.

    Inputs are seeded on a tensor grid over ``U`` and states on a coarse grid
    over ``X``; each seed is Newton-projected onto the fixed-point manifold.
    The best ``n_polish`` admissible points are refined with SLSQP on the
    equality-constrained problem.  Ties go to the lexicographically smallest
    state.
    """
    n, m = model.state_dim, model.input_dim
    u_axes = [np.linspace(lo, hi, input_points) for lo, hi in zip(model.input_lb, model.input_ub)]
    x_axes = [np.linspace(lo, hi, state_points) for lo, hi in zip(model.state_lb, model.state_ub)]
    x_seeds = [np.array(p) for p in itertools.product(*x_axes)]

    candidates = []
    for u_tuple in itertools.product(*u_axes):
        u = np.array(u_tuple)
        found = []
        for x0 in x_seeds:
            xs = _newton_fixed_point(model, x0.copy(), u)
            if xs is None or not model.in_state_set(xs):
                continue
            if any(np.allclose(xs, f, atol=1e-8) for f in found):
                continue
            found.append(xs)
            candidates.append((float(econ.evaluate(xs, u)), xs, u))
    if not candidates:
        raise InfeasibleModelError(f"no fixed point of {model.name} inside X x U")

    candidates.sort(key=lambda c: (c[0], tuple(c[1])))
    best = candidates[0]

    bounds = list(zip(model.state_lb, model.state_ub)) + list(zip(model.input_lb, model.input_ub))
    scale = np.array([hi - lo if hi > lo else 1.0 for lo, hi in bounds])
    offset = np.array([lo for lo, _ in bounds])

    def unpack(z):
        w = offset + scale * z
        return w[:n], w[n:]

    def obj(z):
        x, u = unpack(z)
        return float(econ.evaluate(x, u))

    def eq(z):
        x, u = unpack(z)
        return (model.dynamics(x, u) - x) / scale[:n]

    for val, xs, us in candidates[:n_polish]:
        z0 = (np.concatenate([xs, us]) - offset) / scale
        res = minimize(obj, z0, method="SLSQP", bounds=[(0.0, 1.0)] * (n + m),
                       constraints=[{"type": "eq", "fun": eq}],
                       options={"maxiter": 200, "ftol": 1e-12})
        x_p, u_p = unpack(np.clip(res.x, 0.0, 1.0))
        x_p = _newton_fixed_point(model, x_p, u_p)
        if x_p is None or not model.in_state_set(x_p) or not model.in_input_set(u_p):
            continue
        v = float(econ.evaluate(x_p, u_p))
        if (v, tuple(x_p)) < (best[0], tuple(best[1])):
            best = (v, x_p, u_p)

    value, x_s, u_s = best
    residual = np.linalg.norm(model.dynamics(x_s, u_s) - x_s)
    if residual > 1e-8:
        raise InfeasibleModelError(f"steady-state residual {residual:.3g} too large")
    return SteadyState(x_s=np.array(x_s, dtype=float), u_s=np.array(u_s, dtype=float),
                       value=float(value))


def shift_to_origin(model: SystemModel, ss: SteadyState) -> SystemModel:
    """Equivalent model in deviation coordinates ``x - x_s``, ``u - u_s``."""
    x_s = np.asarray(ss.x_s, dtype=float)
    u_s = np.asarray(ss.u_s, dtype=float)
    if x_s.shape != (model.state_dim,) or u_s.shape != (model.input_dim,):
        raise ContractViolation("steady state dimensions do not match model")
    if not np.any(x_s) and not np.any(u_s):
        return model

    f = model.dynamics

    def dynamics(x, u):
        return f(np.asarray(x) + x_s, np.asarray(u) + u_s) - x_s

    sensitivity = None
    if model.sensitivity is not None:
        sens = model.sensitivity

        def sensitivity(x, u):
            xn, A, B = sens(np.asarray(x) + x_s, np.asarray(u) + u_s)
            return xn - x_s, A, B

    return SystemModel(
        state_dim=model.state_dim, input_dim=model.input_dim, dynamics=dynamics,
        state_lb=model.state_lb - x_s, state_ub=model.state_ub - x_s,
        input_lb=model.input_lb - u_s, input_ub=model.input_ub - u_s,
        sample_time=model.sample_time, sensitivity=sensitivity,
        name=f"{model.name} (shifted)", state_names=model.state_names,
        input_names=model.input_names,
    )
