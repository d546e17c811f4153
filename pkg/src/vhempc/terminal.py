"""Terminal ingredients: quadratic Lyapunov function, local LQR law, levels.

``V(x) = x' P x`` and ``K(x) = K_gain x`` come from the discrete LQR of the
linearisation at the origin.  The terminal level ``alpha`` is the largest
level on a geometric grid whose sublevel set passes a sampled check of the
decrease condition ``V(f(x, K x)) - V(x) <= -gamma0(x, K x)`` together with
``X_f subset X`` and ``K X_f subset U``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation, DesignFailure
from .model import SET_TOL, SystemModel

DEFAULT_SEED = 0xC0FFEE


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    P: np.ndarray
    K_gain: np.ndarray
    alpha: float
    psi: float
    gamma_Q: np.ndarray
    gamma_R: np.ndarray
    input_lb: np.ndarray
    input_ub: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
            raise ContractViolation("P must be symmetric")
        if np.min(np.linalg.eigvalsh(P)) <= 0:
            raise ContractViolation("P must be positive definite")
        if not (0 < self.psi <= self.alpha):
            raise ContractViolation(f"need 0 < psi <= alpha, got psi={self.psi}, alpha={self.alpha}")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "K_gain", np.atleast_2d(np.asarray(self.K_gain, dtype=float)))
        object.__setattr__(self, "gamma_Q", np.atleast_2d(np.asarray(self.gamma_Q, dtype=float)))
        object.__setattr__(self, "gamma_R", np.atleast_2d(np.asarray(self.gamma_R, dtype=float)))
        object.__setattr__(self, "input_lb", np.asarray(self.input_lb, dtype=float).reshape(-1))
        object.__setattr__(self, "input_ub", np.asarray(self.input_ub, dtype=float).reshape(-1))

    def lyapunov(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x)

    def control(self, x) -> np.ndarray:
        """``K(x)``, clamped componentwise into ``U``."""
        return np.clip(self.K_gain @ np.asarray(x, dtype=float), self.input_lb, self.input_ub)

    def gamma0(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.gamma_Q @ x + u @ self.gamma_R @ u)

    def in_terminal_set(self, x) -> bool:
        return self.lyapunov(x) <= self.alpha + SET_TOL

    def in_psi_set(self, x) -> bool:
        return self.lyapunov(x) <= self.psi + SET_TOL


def lyapunov(ti: TerminalIngredients, x) -> float:
    return ti.lyapunov(x)


def terminal_control(ti: TerminalIngredients, x) -> np.ndarray:
    return ti.control(x)


def in_terminal_set(ti: TerminalIngredients, x) -> bool:
    return ti.in_terminal_set(x)


def in_psi_set(ti: TerminalIngredients, x) -> bool:
    return ti.in_psi_set(x)


def dlqr_iterate(A, B, Q_w, R_w, tol=1e-10, max_iter=100_000):
    """Riccati fixed-point iteration; returns ``(P, K_gain)`` with ``u = K_gain x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q_w = np.atleast_2d(np.asarray(Q_w, dtype=float))
    R_w = np.atleast_2d(np.asarray(R_w, dtype=float))
    P = Q_w.copy()
    for _ in range(max_iter):
        G = R_w + B.T @ P @ B
        P_next = Q_w + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(G, B.T @ P @ A)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e12:
            raise DesignFailure("Riccati iteration diverged: linearisation not stabilisable")
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise DesignFailure("Riccati iteration did not converge")
    K_gain = -np.linalg.solve(R_w + B.T @ P @ B, B.T @ P @ A)
    if np.max(np.abs(np.linalg.eigvals(A + B @ K_gain))) >= 1.0:
        raise DesignFailure("LQR closed loop is not Schur stable")
    return P, K_gain


def design_lqr(model: SystemModel, Q_w, R_w):
    """Infinite-horizon discrete LQR for the linearisation of ``model`` at the origin."""
    _, A, B = model.step_with_jacobian(np.zeros(model.state_dim), np.zeros(model.input_dim))
    return dlqr_iterate(A, B, Q_w, R_w)


@dataclass
class VerificationReport:
    passed: bool
    max_decrease_violation: float
    n_admissibility_failures: int
    alpha: float
    psi: float
    n_samples: int

    def to_dict(self):
        """JSON-ready fields; the flag is serialised as ``pass``."""
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def sample_ellipsoid(P, level, n_samples, rng, boundary_fraction=0.5):
    """Points of ``{x : x'Px <= level}``: half uniform in volume, half on the boundary."""
    P = np.atleast_2d(P)
    n = P.shape[0]
    if n_samples <= 0:
        return np.zeros((0, n))
    z = rng.standard_normal((n_samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    radius = rng.uniform(size=n_samples) ** (1.0 / n)
    n_boundary = int(boundary_fraction * n_samples)
    radius[:n_boundary] = 1.0
    z *= radius[:, None]
    L = np.linalg.cholesky(P)
    # x' P x = level * |z|^2
    return np.sqrt(level) * np.linalg.solve(L.T, z.T).T


def _check_level(model, P, K_gain, gamma_Q, gamma_R, level, unit_samples):
    L = np.linalg.cholesky(P)
    xs = np.sqrt(level) * np.linalg.solve(L.T, unit_samples.T).T
    max_violation = -np.inf
    n_fail = 0
    for x in xs:
        u = K_gain @ x
        if not model.in_state_set(x) or not model.in_input_set(u):
            n_fail += 1
            continue
        x_next = model.step(x, u)
        viol = x_next @ P @ x_next - x @ P @ x + (x @ gamma_Q @ x + u @ gamma_R @ u)
        max_violation = max(max_violation, float(viol))
    if max_violation == -np.inf:
        max_violation = 0.0
    return max_violation, n_fail


def _unit_samples(n, n_samples, seed):
    rng = np.random.default_rng(seed)
    return sample_ellipsoid(np.eye(n), 1.0, n_samples, rng)


def verify_assumption1(model: SystemModel, ti: TerminalIngredients, n_samples: int = 10_000,
                       seed: int = DEFAULT_SEED) -> VerificationReport:
    """Sampled check of the terminal decrease condition and admissibility on ``X_f``."""
    if n_samples <= 0:
        return VerificationReport(True, 0.0, 0, ti.alpha, ti.psi, 0)
    unit = _unit_samples(model.state_dim, n_samples, seed)
    viol, n_fail = _check_level(model, ti.P, ti.K_gain, ti.gamma_Q, ti.gamma_R, ti.alpha, unit)
    return VerificationReport(
        passed=bool(viol <= SET_TOL and n_fail == 0),
        max_decrease_violation=viol,
        n_admissibility_failures=n_fail,
        alpha=ti.alpha, psi=ti.psi, n_samples=n_samples,
    )


def max_box_lyapunov(model: SystemModel, P) -> float:
    """Largest ``x'Px`` over the vertices of ``X`` (the maximum of a convex form)."""
    corners = np.array(np.meshgrid(*zip(model.state_lb, model.state_ub))).reshape(model.state_dim, -1).T
    return float(max(c @ P @ c for c in corners))


def estimate_alpha(model: SystemModel, P, K_gain, gamma_Q, gamma_R, n_samples: int = 10_000,
                   seed: int = DEFAULT_SEED, n_levels: int = 50, v_min: float = 1e-6) -> float:
    """Largest passing level on a geometric grid, located by bisection over grid indices."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    K_gain = np.atleast_2d(np.asarray(K_gain, dtype=float))
    gamma_Q = np.atleast_2d(np.asarray(gamma_Q, dtype=float))
    gamma_R = np.atleast_2d(np.asarray(gamma_R, dtype=float))
    v_max = max_box_lyapunov(model, P)
    levels = np.geomspace(v_min, v_max, n_levels)
    unit = _unit_samples(model.state_dim, n_samples, seed)

    def passes(i):
        viol, n_fail = _check_level(model, P, K_gain, gamma_Q, gamma_R, levels[i], unit)
        return viol <= SET_TOL and n_fail == 0

    if not passes(0):
        raise DesignFailure("decrease condition fails even at the smallest level")
    lo, hi = 0, n_levels  # levels[lo] passes; levels[hi] (if any) fails
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return float(levels[lo])


def build_terminal_ingredients(model: SystemModel, Q_w, R_w, gamma_scale: float = 0.5,
                               psi_fraction: float = 0.01, n_samples: int = 10_000,
                               seed: int = DEFAULT_SEED) -> TerminalIngredients:
    """LQR design, ``gamma0 = gamma_scale * (LQR stage cost)``, sampled ``alpha``, ``psi``."""
    if not 0 < psi_fraction <= 1:
        raise ContractViolation("psi_fraction must lie in (0, 1]")
    Q_w = np.atleast_2d(np.asarray(Q_w, dtype=float))
    R_w = np.atleast_2d(np.asarray(R_w, dtype=float))
    P, K_gain = design_lqr(model, Q_w, R_w)
    gamma_Q, gamma_R = gamma_scale * Q_w, gamma_scale * R_w
    alpha = estimate_alpha(model, P, K_gain, gamma_Q, gamma_R, n_samples=n_samples, seed=seed)
    return TerminalIngredients(P=P, K_gain=K_gain, alpha=alpha, psi=psi_fraction * alpha,
                               gamma_Q=gamma_Q, gamma_R=gamma_R,
                               input_lb=model.input_lb, input_ub=model.input_ub)
