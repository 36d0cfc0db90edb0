"""Receding-horizon tracking NMPC with a hybrid controller model.

Each sampling instant solves a finite-horizon optimal control problem by
single shooting: the decision variables are the piecewise-constant MV moves
on the control grid, states come from forward integration of the hybrid
model, and the box-constrained Levenberg-Marquardt solver from `nls`
minimizes the stacked tracking + move-suppression residual. Only the first
move is applied; the shifted plan warm-starts the next step.

The horizon need not be an integer multiple of the sampling time: a
trailing remainder interval repeats the last move, so it adds prediction
coverage without adding a decision variable.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import ModelStructure, PiecewiseConstantProfile, TimeGrid
from .errors import ConfigError, HybridIdError
from .hybrid import HybridModel
from .integrate import EnsembleProfile, IntegratorConfig, rollout
from .nls import LmConfig, LmReport, ResidualProblem, lm_solve


@dataclass(frozen=True)
class MpcConfig:
    """Tracking-NMPC tuning: grids, weights, bounds, and solver knobs.

    cv_weights is a diagonal Q over the model outputs (zero entries leave an
    output uncontrolled); move_weights is a diagonal S over MV increments.
    The setpoint schedule holds one target row per output, piecewise
    constant in absolute time; beyond its last knot the final value holds.
    """

    sampling: float = 8.0
    horizon: float = 180.0
    cv_weights: np.ndarray = ()
    move_weights: np.ndarray = ()
    mv_bounds: np.ndarray = ()  # (n_u, 2)
    setpoints: Optional[PiecewiseConstantProfile] = None
    lm: LmConfig = LmConfig(max_iter=25)
    warm_start: bool = True
    integrator: IntegratorConfig = IntegratorConfig(max_step=4.0)

    def __post_init__(self):
        if self.sampling <= 0:
            raise ConfigError("sampling time must be positive")
        if self.horizon < self.sampling:
            raise ConfigError("horizon must cover at least one sampling interval")
        q = np.asarray(self.cv_weights, dtype=float)
        s = np.asarray(self.move_weights, dtype=float)
        if q.ndim != 1 or s.ndim != 1:
            raise ConfigError("cv_weights and move_weights must be 1-d diagonals")
        if np.any(q < 0) or np.any(s < 0):
            raise ConfigError("weights must be nonnegative")
        b = np.asarray(self.mv_bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 2:
            raise ConfigError("mv_bounds must be (n_u, 2)")
        if np.any(b[:, 0] > b[:, 1]):
            raise ConfigError("mv_bounds must satisfy lo <= hi")
        object.__setattr__(self, "cv_weights", q)
        object.__setattr__(self, "move_weights", s)
        object.__setattr__(self, "mv_bounds", b)

    @property
    def n_moves(self) -> int:
        return int(np.floor(self.horizon / self.sampling + 1e-9))

    def control_knots(self) -> np.ndarray:
        """Relative knots: n_moves full intervals plus a possible remainder."""
        k = self.sampling * np.arange(self.n_moves + 1.0)
        if self.horizon - k[-1] > 1e-9:
            k = np.append(k, self.horizon)
        return k


@dataclass(frozen=True)
class MvPlan:
    """An OCP solution: the move sequence and the MV applied before it."""

    t0: float
    moves: np.ndarray  # (n_moves, n_u)
    u_prev: np.ndarray  # (n_u,) MV applied over the preceding interval

    def shifted(self) -> "MvPlan":
        """Receding-horizon shift: drop the first move, repeat the last."""
        mv = np.vstack([self.moves[1:], self.moves[-1:]])
        return MvPlan(self.t0, mv, np.asarray(self.moves[0]))


@dataclass
class MpcStepDiagnostics:
    cost: float
    iterations: int
    wall_time: float
    termination_reason: str
    fallback: bool = False


def _setpoint_rows(cfg: MpcConfig, times: np.ndarray) -> np.ndarray:
    sp = cfg.setpoints
    if sp is None:
        raise ConfigError("MpcConfig.setpoints is required for mpc_step")
    t = np.clip(times, sp.grid.t0, sp.grid.t_end - 1e-12)
    return np.array([sp(tt) for tt in t])


def _horizon_profile(
    grid: TimeGrid, moves: np.ndarray
) -> PiecewiseConstantProfile:
    vals = moves
    if len(grid) - 1 == moves.shape[0] + 1:  # remainder interval
        vals = np.vstack([moves, moves[-1:]])
    return PiecewiseConstantProfile(grid, vals)


def mpc_step(
    hm: HybridModel,
    x_now: np.ndarray,
    t_now: float,
    cfg: MpcConfig,
    prev_plan: Optional[MvPlan] = None,
) -> Tuple[np.ndarray, MvPlan, MpcStepDiagnostics]:
    """Solve one receding-horizon OCP and return the first move.

    Solver failure falls back to holding the previously applied MV and
    flags the step in the diagnostics.
    """
    t_start = time.perf_counter()
    x_now = np.asarray(x_now, dtype=float)
    if not np.all(np.isfinite(x_now)):
        raise ConfigError("mpc_step needs a finite current state")
    base = hm.base
    n_u = base.n_u
    n_moves = cfg.n_moves
    knots = t_now + cfg.control_knots()
    grid = TimeGrid(knots, unit=hm.time_unit)
    out_grid = TimeGrid(knots, unit=hm.time_unit)  # cost samples = interval ends
    sp_rows = _setpoint_rows(cfg, knots[1:])
    q_sqrt = np.sqrt(cfg.cv_weights)
    s_sqrt = np.sqrt(cfg.move_weights)
    lo, hi = cfg.mv_bounds[:, 0], cfg.mv_bounds[:, 1]
    flux = hm.flux_fn()

    if prev_plan is not None and cfg.warm_start:
        shifted = prev_plan.shifted()
        theta0 = shifted.moves.ravel()
        u_prev = shifted.u_prev
    elif prev_plan is not None:
        theta0 = prev_plan.moves.ravel()
        u_prev = prev_plan.u_prev
    else:
        u0 = np.clip(0.5 * (lo + hi), lo, hi)
        theta0 = np.tile(u0, n_moves)
        u_prev = u0

    def residual(theta: np.ndarray) -> np.ndarray:
        moves = theta.reshape(n_moves, n_u)
        states = rollout(
            base, x_now, _horizon_profile(grid, moves), flux, out_grid,
            cfg.integrator,
        )
        z = base.output_map(states[1:])
        track = (q_sqrt * (z - sp_rows)).ravel()
        du = np.diff(np.vstack([u_prev[None, :], moves]), axis=0)
        return np.concatenate([track, (s_sqrt * du).ravel()])

    def jacobian(theta: np.ndarray, r0: np.ndarray) -> np.ndarray:
        # one batched rollout integrates every forward-difference member
        dim = theta.size
        steps = 1e-6 * np.maximum(np.abs(theta), 1.0)
        thetas = theta[None, :] + np.diag(steps)
        ens_vals = thetas.reshape(dim, n_moves, n_u)
        if len(grid) - 1 == n_moves + 1:
            ens_vals = np.concatenate([ens_vals, ens_vals[:, -1:, :]], axis=1)
        ens = EnsembleProfile(grid, ens_vals)
        states = rollout(
            base, np.tile(x_now, (dim, 1)), ens, flux, out_grid, cfg.integrator
        )
        z = base.output_map(states[1:])  # (n_t, dim, n_z)
        track = (q_sqrt * (z - sp_rows[:, None, :])).transpose(1, 0, 2)
        jac = np.empty((r0.size, dim))
        n_track = track.shape[1] * track.shape[2]
        jac[:n_track] = (track.reshape(dim, -1) - r0[None, :n_track]).T
        for i in range(dim):
            moves = thetas[i].reshape(n_moves, n_u)
            du = np.diff(np.vstack([u_prev[None, :], moves]), axis=0)
            jac[n_track:, i] = (s_sqrt * du).ravel() - r0[n_track:]
        return jac / steps[None, :]

    problem = ResidualProblem(
        residual_fn=residual,
        dim_theta=n_moves * n_u,
        bounds=np.tile(cfg.mv_bounds, (n_moves, 1)),
        jacobian=jacobian,
    )
    try:
        rep = lm_solve(problem, theta0, cfg.lm)
        moves = rep.theta_opt.reshape(n_moves, n_u)
        plan = MvPlan(t_now, moves, np.asarray(u_prev, dtype=float))
        diag = MpcStepDiagnostics(
            cost=rep.cost,
            iterations=rep.iterations,
            wall_time=time.perf_counter() - t_start,
            termination_reason=rep.termination_reason,
        )
        return moves[0].copy(), plan, diag
    except HybridIdError:
        hold = np.clip(np.asarray(u_prev, dtype=float), lo, hi)
        plan = MvPlan(t_now, np.tile(hold, (n_moves, 1)), hold)
        diag = MpcStepDiagnostics(
            cost=float("nan"),
            iterations=0,
            wall_time=time.perf_counter() - t_start,
            termination_reason="fallback",
            fallback=True,
        )
        return hold, plan, diag


@dataclass
class ClosedLoopLog:
    """One row per sampling instant of the plant/controller alternation."""

    times: np.ndarray
    states: np.ndarray  # plant state at each instant
    measured: np.ndarray  # CVs fed to the controller (noise included)
    applied: np.ndarray  # MV held over [t_k, t_k + sampling)
    costs: np.ndarray
    iterations: np.ndarray
    wall_times: np.ndarray
    fallbacks: np.ndarray
    aborted: bool = False

    def tracking_error(self, cfg: MpcConfig, output_index: int) -> np.ndarray:
        sp = _setpoint_rows(cfg, self.times)[:, output_index]
        return self.measured[:, output_index] - sp


def closed_loop(
    plant: ModelStructure,
    plant_flux: Callable,
    hm: HybridModel,
    cfg: MpcConfig,
    duration: float,
    x0: np.ndarray,
    plant_integrator: IntegratorConfig = IntegratorConfig(max_step=0.5),
    meas_noise: float = 0.0,
    rng_seed: int = 0,
    u_init: Optional[np.ndarray] = None,
) -> ClosedLoopLog:
    """Alternate truth-plant integration with mpc_step on the measured state.

    All states are measured (full state feedback); optional i.i.d. Gaussian
    measurement noise with standard deviation `meas_noise` per unit of the
    measured value is seeded for reproducibility. With u_init given, the
    first OCP warm starts from that constant move sequence instead of the
    mid-bounds cold start (useful when the loop begins at a known operating
    point). Plant integration failure aborts with the partial log flagged.
    """
    if plant.n_x != hm.base.n_x or plant.n_u != hm.base.n_u:
        raise ConfigError("plant and controller model dimensions differ")
    n_steps = int(np.floor(duration / cfg.sampling + 1e-9))
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed]))
    x = np.asarray(x0, dtype=float).copy()
    plan: Optional[MvPlan] = None
    if u_init is not None:
        u_init = np.asarray(u_init, dtype=float)
        plan = MvPlan(
            t0=-cfg.sampling,
            moves=np.tile(u_init, (cfg.n_moves, 1)),
            u_prev=u_init,
        )
    times, states, measured, applied = [], [], [], []
    costs, iters, walls, fbs = [], [], [], []
    aborted = False
    for k in range(n_steps):
        t_k = k * cfg.sampling
        z = plant.output_map(x)
        if meas_noise > 0.0:
            z = z * (1.0 + meas_noise * rng.standard_normal(z.shape))
        u, plan, diag = mpc_step(hm, z, t_k, cfg, plan)
        times.append(t_k)
        states.append(x.copy())
        measured.append(np.asarray(z, dtype=float))
        applied.append(u)
        costs.append(diag.cost)
        iters.append(diag.iterations)
        walls.append(diag.wall_time)
        fbs.append(diag.fallback)
        hold = PiecewiseConstantProfile(
            TimeGrid([t_k, t_k + cfg.sampling], unit=hm.time_unit), u[None, :]
        )
        try:
            traj = rollout(
                plant, x,
                hold, plant_flux,
                TimeGrid([t_k, t_k + cfg.sampling], unit=hm.time_unit),
                plant_integrator,
            )
        except HybridIdError:
            aborted = True
            break
        x = traj[-1]
    return ClosedLoopLog(
        times=np.asarray(times),
        states=np.asarray(states),
        measured=np.asarray(measured),
        applied=np.asarray(applied),
        costs=np.asarray(costs),
        iterations=np.asarray(iters),
        wall_times=np.asarray(walls),
        fallbacks=np.asarray(fbs, dtype=bool),
        aborted=aborted,
    )


@dataclass(frozen=True)
class TruthController:
    """Adapter exposing a truth-flux model through the controller interface,
    for perfect-model closed-loop studies."""

    base: ModelStructure
    flux: Callable

    @property
    def time_unit(self) -> str:
        return self.base.time_unit

    def flux_fn(self) -> Callable:
        return self.flux


def tank_mpc_config(
    setpoints: PiecewiseConstantProfile,
    q_h2: float = 1.0,
    s_move: float = 0.1,
    mv_hi: float = 0.05,
) -> MpcConfig:
    """Default three-tank tuning: track h2 only, gentle move suppression."""
    q = np.zeros(4)
    q[1] = q_h2
    return MpcConfig(
        cv_weights=q,
        move_weights=s_move * np.ones(2),
        mv_bounds=np.array([[0.0, mv_hi], [0.0, mv_hi]]),
        setpoints=setpoints,
    )
