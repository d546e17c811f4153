"""Variable-horizon economic MPC with convergence filters.

Modules
-------
model       system description, RK4 discretisation, steady-state search
terminal    LQR terminal ingredients and their sampled verification
costs       economic and auxiliary costs, rollouts
ocp         single-shooting FHOCP solver with warm-start dominance
filters     convergence filters, candidates, horizon law
controller  the closed loop and its convergence certificate
plants      the shipped CSTR and scalar benchmarks
cli         ``vhempc`` command-line front end
"""
from .controller import (ControllerConfig, ConvergenceCertificate, StepRecord, VHEMPController,
                         estimate_tau, initial_horizon_table, min_initial_horizon,
                         reference_trajectory, run_closed_loop)
from .costs import AuxiliaryCost, EconomicCost, Trajectory, rollout
from .errors import (ConfigError, ContractViolation, DesignFailure, InfeasibleModelError,
                     InfeasibleProblem, InitializationError, InternalInvariantError,
                     NoEntryError, NumericFailure, VhempcError)
from .filters import FilterSpec, HorizonSchedule, iterative_process, update_horizon
from .model import SystemModel, find_steady_state, rk4_discretize
from .ocp import FhocpSpec, SolveRecord, solve, stabilizing_value
from .plants import build_benchmark
from .terminal import TerminalIngredients, build_terminal_ingredients, verify_assumption1

__version__ = "0.1.0"
