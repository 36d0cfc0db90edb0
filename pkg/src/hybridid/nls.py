"""Box-constrained Levenberg-Marquardt for stacked weighted residuals.

Damping uses Marquardt scaling (lambda * diag(J^T J)) because residual
components here span orders of magnitude; box constraints are enforced by
clamping each trial point before evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.linalg

from .errors import ConfigError, HybridIdError, NotPositiveDefiniteError

FD_REL_STEP = 1e-6


def solve_spd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b for symmetric positive definite A via Cholesky."""
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - alias varies
        raise NotPositiveDefiniteError(str(exc)) from exc
    return scipy.linalg.cho_solve((c, low), b, check_finite=False)


def fd_jacobian(fn: Callable, theta: np.ndarray, r0: Optional[np.ndarray] = None,
                rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Forward finite-difference Jacobian with relative steps."""
    if r0 is None:
        r0 = fn(theta)
    jac = np.empty((r0.size, theta.size))
    for i in range(theta.size):
        h = rel_step * max(abs(theta[i]), 1.0)
        tp = theta.copy()
        tp[i] += h
        jac[:, i] = (fn(tp) - r0) / h
    return jac


@dataclass(frozen=True)
class ResidualProblem:
    """A stacked residual r(theta) with optional box bounds.

    jacobian, when given, is called as jacobian(theta, r_at_theta) and must
    return the (m, n) Jacobian; otherwise forward finite differences with
    relative step 1e-6 are used.
    """

    residual_fn: Callable[[np.ndarray], np.ndarray]
    dim_theta: int
    bounds: Optional[np.ndarray] = None  # (n, 2)
    jacobian: Optional[Callable] = None

    def __post_init__(self):
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.shape != (self.dim_theta, 2):
                raise ConfigError("bounds must be (dim_theta, 2)")
            if np.any(b[:, 0] > b[:, 1]):
                raise ConfigError("bounds must satisfy lo <= hi")
            object.__setattr__(self, "bounds", b)

    def clip(self, theta: np.ndarray) -> np.ndarray:
        if self.bounds is None:
            return theta
        return np.clip(theta, self.bounds[:, 0], self.bounds[:, 1])


@dataclass(frozen=True)
class LmConfig:
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_iter: int = 200
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    cost_tol: float = 1e-12

    def __post_init__(self):
        if not (0 < self.lambda_down < 1 < self.lambda_up):
            raise ConfigError("need lambda_down < 1 < lambda_up")
        if min(self.lambda0, self.max_iter, self.grad_tol, self.step_tol,
               self.cost_tol) <= 0:
            raise ConfigError("LM tolerances must be positive")


@dataclass
class LmReport:
    theta_opt: np.ndarray
    cost: float
    iterations: int
    termination_reason: str  # gradient | step | cost | max_iter
    cost_history: List[float] = field(default_factory=list)


def lm_solve(problem: ResidualProblem, theta0: np.ndarray,
             cfg: LmConfig = LmConfig()) -> LmReport:
    """Minimize 0.5 * ||r(theta)||^2 over the box."""
    theta = problem.clip(np.array(theta0, dtype=float))
    try:
        r = problem.residual_fn(theta)
    except HybridIdError as exc:
        raise HybridIdError(f"residual failed at the initial point: {exc}") from exc
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = cfg.lambda0
    reason = "max_iter"
    it = 0

    def jac(th, rr):
        if problem.jacobian is not None:
            return problem.jacobian(th, rr)
        return fd_jacobian(problem.residual_fn, th, rr)

    J = jac(theta, r)
    for it in range(1, cfg.max_iter + 1):
        g = J.T @ r
        if np.max(np.abs(g)) <= cfg.grad_tol:
            reason = "gradient"
            break
        JtJ = J.T @ J
        d = np.diag(JtJ).copy()
        d[d <= 0] = 1e-30
        accepted = False
        while True:
            try:
                delta = solve_spd(JtJ + lam * np.diag(d), -g)
            except NotPositiveDefiniteError:
                lam *= cfg.lambda_up
                if lam > 1e16:
                    break
                continue
            trial = problem.clip(theta + delta)
            step = trial - theta
            try:
                r_trial = problem.residual_fn(trial)
                cost_trial = 0.5 * float(r_trial @ r_trial)
            except HybridIdError:
                cost_trial = np.inf
            if np.isfinite(cost_trial) and cost_trial < cost:
                rel_drop = (cost - cost_trial) / max(cost, 1e-300)
                theta, r, prev_cost, cost = trial, r_trial, cost, cost_trial
                history.append(cost)
                lam = max(lam * cfg.lambda_down, 1e-16)
                accepted = True
                if np.linalg.norm(step) <= cfg.step_tol * (
                    np.linalg.norm(theta) + cfg.step_tol
                ):
                    reason = "step"
                elif rel_drop <= cfg.cost_tol:
                    reason = "cost"
                break
            lam *= cfg.lambda_up
            if lam > 1e16:
                break
        if not accepted:
            # no decreasing step found at any damping: local minimum
            reason = "step"
            break
        if reason in ("step", "cost"):
            break
        J = jac(theta, r)
    return LmReport(
        theta_opt=theta,
        cost=cost,
        iterations=it,
        termination_reason=reason,
        cost_history=history,
    )
