"""The two shipped benchmark plants and a helper assembling their ingredients.

``cstr``
    Second-order exothermic reaction in a CSTR (states ``C_A`` [kmol/m^3],
    ``T`` [K]; inputs feed concentration ``C_A0`` [kmol/m^3] and heat rate
    ``Q`` [kJ/h]), RK4-discretised with a 0.01 h period.  The economic cost is
    the negated production rate plus quadratic operating costs on feed, heat
    and reactor temperature; without these the optimal steady state sits on
    the boundary of ``X x U``.
``scalar``
    ``x+ = 0.9 x + u`` on ``X = [-2, 2]``, ``U = [-1, 1]`` with ``L_e = x u``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .costs import AuxiliaryCost, EconomicCost, shift_economic
from .errors import ContractViolation
from .model import SteadyState, SystemModel, find_steady_state, rk4_discretize, shift_to_origin
from .terminal import DEFAULT_SEED, TerminalIngredients, build_terminal_ingredients


@dataclass(frozen=True)
class CSTRParams:
    F_over_V: float = 5.0        # 1/h
    T0: float = 300.0            # K
    k0: float = 8.46e6           # m^3/(kmol h)
    E_over_R: float = 6013.95    # K
    dH: float = -1.15e4          # kJ/kmol
    rho_cp: float = 231.0        # kJ/(m^3 K)
    V: float = 1.0               # m^3
    # operating-cost weights of the economic stage cost
    feed_weight: float = 2.0
    feed_nominal: float = 4.0
    heat_weight: float = 2.0
    heat_scale: float = 1e5
    temp_weight: float = 10.0
    temp_ref: float = 300.0
    temp_scale: float = 100.0


CSTR_STATE_BOX = ((0.0, 6.0), (280.0, 420.0))
CSTR_INPUT_BOX = ((0.5, 7.5), (-5e5, 5e5))


def cstr_rate(p: CSTRParams, C, T):
    return p.k0 * math.exp(-p.E_over_R / T) * C * C


def cstr_model(params: CSTRParams = CSTRParams(), sample_time: float = 0.01,
               substeps: int = 1) -> SystemModel:
    p = params
    heat_gain = -p.dH / p.rho_cp
    heat_in = 1.0 / (p.rho_cp * p.V)

    def ode(x, u):
        C, T = float(x[0]), float(x[1])
        k = p.k0 * math.exp(-p.E_over_R / T)
        r = k * C * C
        return np.array([p.F_over_V * (float(u[0]) - C) - r,
                         p.F_over_V * (p.T0 - T) + heat_gain * r + heat_in * float(u[1])])

    def ode_jacobian(x, u):
        C, T = float(x[0]), float(x[1])
        k = p.k0 * math.exp(-p.E_over_R / T)
        dr_dC = 2.0 * k * C
        dr_dT = k * C * C * p.E_over_R / (T * T)
        Jx = np.array([[-p.F_over_V - dr_dC, -dr_dT],
                       [heat_gain * dr_dC, -p.F_over_V + heat_gain * dr_dT]])
        Ju = np.array([[p.F_over_V, 0.0], [0.0, heat_in]])
        return Jx, Ju

    dynamics, sensitivity = rk4_discretize(ode, sample_time, substeps, ode_jacobian)
    return SystemModel(
        state_dim=2, input_dim=2, dynamics=dynamics,
        state_lb=np.array([b[0] for b in CSTR_STATE_BOX]),
        state_ub=np.array([b[1] for b in CSTR_STATE_BOX]),
        input_lb=np.array([b[0] for b in CSTR_INPUT_BOX]),
        input_ub=np.array([b[1] for b in CSTR_INPUT_BOX]),
        sample_time=sample_time, sensitivity=sensitivity, name="cstr",
        state_names=("C_A", "T"), input_names=("C_A0", "Q"),
    )


def cstr_economic_cost(params: CSTRParams = CSTRParams()) -> EconomicCost:
    p = params

    def evaluate(x, u):
        C, T = float(x[0]), float(x[1])
        CA0, Q = float(u[0]), float(u[1])
        return (-cstr_rate(p, C, T)
                + p.feed_weight * (CA0 - p.feed_nominal) ** 2
                + p.heat_weight * (Q / p.heat_scale) ** 2
                + p.temp_weight * ((T - p.temp_ref) / p.temp_scale) ** 2)

    def gradient(x, u):
        C, T = float(x[0]), float(x[1])
        CA0, Q = float(u[0]), float(u[1])
        k = p.k0 * math.exp(-p.E_over_R / T)
        gx = np.array([-2.0 * k * C,
                       -k * C * C * p.E_over_R / (T * T)
                       + 2.0 * p.temp_weight * (T - p.temp_ref) / p.temp_scale ** 2])
        gu = np.array([2.0 * p.feed_weight * (CA0 - p.feed_nominal),
                       2.0 * p.heat_weight * Q / p.heat_scale ** 2])
        return gx, gu

    return EconomicCost(evaluate=evaluate, gradient=gradient)


def scalar_model(a: float = 0.9) -> SystemModel:
    A = np.array([[a]])
    B = np.array([[1.0]])

    def dynamics(x, u):
        return a * np.asarray(x, dtype=float) + np.asarray(u, dtype=float)

    def sensitivity(x, u):
        return dynamics(x, u), A, B

    return SystemModel(state_dim=1, input_dim=1, dynamics=dynamics,
                       state_lb=np.array([-2.0]), state_ub=np.array([2.0]),
                       input_lb=np.array([-1.0]), input_ub=np.array([1.0]),
                       sensitivity=sensitivity, name="scalar",
                       state_names=("x",), input_names=("u",))


def scalar_economic_cost() -> EconomicCost:
    return EconomicCost(evaluate=lambda x, u: float(x[0] * u[0]),
                        gradient=lambda x, u: (np.array([u[0]], dtype=float),
                                               np.array([x[0]], dtype=float)))


# plant -> (Q_w, R_w, d, b, lambda, default x0 in original coordinates)
PLANT_DEFAULTS = {
    "scalar": dict(Q_w=[[1.0]], R_w=[[1.0]], d=0.1, b=1.0, lam=1.0, x0=[1.9]),
    "cstr": dict(Q_w=[[1.0, 0.0], [0.0, 1e-2]], R_w=[[1.0, 0.0], [0.0, 1e-10]],
                 d=1.0, b=0.01, lam=1.5, x0=[5.5, 380.0]),
}

# initial states for the initial-horizon table: far enough from X_f that the
# reference cost, and hence N0, depends on b
TABLE1_X0 = {"scalar": [1.9], "cstr": [1.0, 340.0]}

# auxiliary weights swept for the initial-horizon table; the same six-point
# shape, scaled to each plant's magnitude of |x|^2 relative to d
B_GRID = {
    "scalar": (0.30, 0.25, 0.20, 0.15, 0.10, 0.05),
    "cstr": (0.030, 0.025, 0.020, 0.015, 0.010, 0.005),
}


@dataclass(frozen=True, eq=False)
class Benchmark:
    """A plant in deviation coordinates with its steady state and terminal ingredients."""

    name: str
    original: SystemModel
    original_econ: EconomicCost
    steady_state: SteadyState
    model: SystemModel
    econ: EconomicCost
    ti: TerminalIngredients
    defaults: dict = field(default_factory=dict)

    def aux(self, d=None, b=None, lam=None) -> AuxiliaryCost:
        return AuxiliaryCost(ti=self.ti,
                             d=self.defaults["d"] if d is None else d,
                             b=self.defaults["b"] if b is None else b,
                             lam=self.defaults["lam"] if lam is None else lam)

    def to_deviation(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) - self.steady_state.x_s

    def from_deviation(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) + self.steady_state.x_s

    @property
    def steady_value(self) -> float:
        return self.steady_state.value


_CACHE: dict = {}


def build_benchmark(plant: str, psi_fraction: float = 0.01, gamma_scale: float = 0.5,
                    seed: int = DEFAULT_SEED) -> Benchmark:
    """Assemble (and memoise) a benchmark; all design steps are deterministic."""
    key = (plant, psi_fraction, gamma_scale, seed)
    if key in _CACHE:
        return _CACHE[key]
    if plant == "cstr":
        original, econ = cstr_model(), cstr_economic_cost()
        ss = find_steady_state(original, econ, input_points=21, state_points=3)
    elif plant == "scalar":
        original, econ = scalar_model(), scalar_economic_cost()
        ss = find_steady_state(original, econ, input_points=101, state_points=3)
    else:
        raise ContractViolation(f"unknown plant {plant!r}; expected 'cstr' or 'scalar'")
    defaults = PLANT_DEFAULTS[plant]
    model = shift_to_origin(original, ss)
    econ_s = shift_economic(econ, ss.x_s, ss.u_s)
    ti = build_terminal_ingredients(model, defaults["Q_w"], defaults["R_w"],
                                    gamma_scale=gamma_scale, psi_fraction=psi_fraction, seed=seed)
    bench = Benchmark(name=plant, original=original, original_econ=econ, steady_state=ss,
                      model=model, econ=econ_s, ti=ti, defaults=dict(defaults))
    _CACHE[key] = bench
    return bench
