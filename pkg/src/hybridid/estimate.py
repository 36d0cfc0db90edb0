"""Step 1: regularized dynamic flux estimation by single shooting.

Decision vector theta = [flux interval values (row-major), optionally x0].
The stacked residual is

    [ L_j^T (z(t_j) - z~_j)  for every measurement time ]
    [ L_k^T (p_{k+1} - p_k)  for every adjacent interval pair ]

with L the Cholesky factor of the corresponding weight matrix, so that
0.5*||r||^2 is half the Eq-style objective (fit + regularization).

The Jacobian uses forward finite differences, evaluated for all columns in
one ensemble rollout; columns belonging to flux intervals are zeroed for
measurement rows that precede the interval (temporal causality).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .core import (
    MeasurementDataset,
    ModelStructure,
    PiecewiseConstantProfile,
    TimeGrid,
    Trajectory,
    grid_union,
)
from .errors import ConfigError, ConsistencyError, EstimationError, HybridIdError
from .integrate import EnsembleProfile, IntegratorConfig, build_step_grid, rollout
from .nls import FD_REL_STEP, LmConfig, LmReport, ResidualProblem, lm_solve


def _weight_chol(w: np.ndarray) -> np.ndarray:
    """Cholesky factor of a PSD weight matrix, with an eigen fallback for
    semidefinite matrices."""
    try:
        return np.linalg.cholesky(w)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (w + w.T))
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)


def expand_reg_weights(w_reg, n_pairs: int, n_p: int) -> np.ndarray:
    """Normalize the regularization weight argument to (n_pairs, n_p, n_p)."""
    if np.isscalar(w_reg):
        return float(w_reg) * np.tile(np.eye(n_p), (n_pairs, 1, 1))
    w = np.asarray(w_reg, dtype=float)
    if w.shape == (n_p, n_p):
        return np.tile(w, (n_pairs, 1, 1))
    if w.shape != (n_pairs, n_p, n_p):
        raise ConfigError(f"w_reg has shape {w.shape}, expected ({n_pairs},{n_p},{n_p})")
    return w


def regularization_value(p: PiecewiseConstantProfile, w_reg) -> float:
    """Quadratic penalty on differences of successive interval values."""
    diffs = np.diff(p.values, axis=0)
    w = expand_reg_weights(w_reg, diffs.shape[0], p.dim)
    return float(np.einsum("ki,kij,kj->", diffs, w, diffs))


def fit_value(traj: Trajectory, ds: MeasurementDataset) -> float:
    """Weighted SSE of trajectory outputs against the dataset."""
    if traj.outputs is None:
        raise ConsistencyError("trajectory has no outputs")
    rows = traj.rows_at(ds.meas_grid.points)
    e = traj.outputs[rows] - ds.z_meas
    return float(np.einsum("ji,jik,jk->", e, ds.weights, e))


def default_disc_grid(meas_grid: TimeGrid, coarsen: int = 10) -> TimeGrid:
    """Flux discretization grid: every `coarsen`-th measurement point, always
    keeping the final one."""
    pts = list(meas_grid.points[::coarsen])
    if pts[-1] != meas_grid.points[-1]:
        pts.append(meas_grid.points[-1])
    return TimeGrid(np.array(pts), unit=meas_grid.unit)


@dataclass(frozen=True)
class EstimationConfig:
    disc_grid: TimeGrid
    w_reg: Union[float, np.ndarray] = 1e-2
    estimate_x0: bool = True
    x0_bounds: Optional[np.ndarray] = None  # (n_x, 2)
    p_init: Optional[np.ndarray] = None  # (n_p,) or (n_int, n_p)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    lm: LmConfig = field(default_factory=LmConfig)


@dataclass
class EstimateResult:
    p_star: PiecewiseConstantProfile
    x0_star: np.ndarray
    trajectory: Trajectory
    fit_cost: float
    reg_cost: float
    per_point_residuals: np.ndarray  # (n_meas, n_z), model minus data
    lm_report: LmReport
    dataset_id: str = ""
    mv: Optional[PiecewiseConstantProfile] = None


def estimate_fluxes(
    model: ModelStructure,
    ds: MeasurementDataset,
    cfg: EstimationConfig,
) -> EstimateResult:
    """Solve the regularized estimation problem for one dataset."""
    disc = cfg.disc_grid
    meas = ds.meas_grid
    if not (
        np.isclose(disc.t0, meas.t0, atol=1e-9)
        and np.isclose(disc.t_end, meas.t_end, atol=1e-9)
    ):
        raise ConfigError(
            "flux discretization grid must span the measurement horizon "
            f"([{disc.t0}, {disc.t_end}] vs [{meas.t0}, {meas.t_end}])"
        )
    n_int = len(disc) - 1
    n_p, n_x, n_z = model.n_p, model.n_x, model.n_z
    n_meas = ds.n_meas
    n_flux_theta = n_int * n_p
    n_theta = n_flux_theta + (n_x if cfg.estimate_x0 else 0)

    # fixed Cholesky factors of all weights
    lz = np.stack([_weight_chol(ds.weights[j]) for j in range(n_meas)])
    wr = expand_reg_weights(cfg.w_reg, n_int - 1, n_p)
    lr = np.stack([_weight_chol(wr[k]) for k in range(n_int - 1)])

    out_grid = grid_union(meas, disc)
    ref_profile = PiecewiseConstantProfile(disc, np.zeros((n_int, n_p)))
    step_grid = build_step_grid(ds.mv, ref_profile, out_grid, cfg.integrator)
    meas_rows = np.searchsorted(out_grid.points, meas.points)

    if cfg.estimate_x0:
        # state selector outputs: first measurement is the best x0 guess
        x0_init = np.array(ds.z_meas[0]) if n_z == n_x else np.array(ds.x0_guess)
    else:
        x0_init = np.array(ds.x0_guess)

    if cfg.p_init is None:
        p_init = np.zeros((n_int, n_p))
    else:
        p_init = np.asarray(cfg.p_init, dtype=float)
        if p_init.ndim == 1:
            p_init = np.tile(p_init, (n_int, 1))

    theta0 = np.concatenate([p_init.ravel()] + ([x0_init] if cfg.estimate_x0 else []))

    bounds = None
    if model.p_bounds is not None or cfg.x0_bounds is not None:
        bounds = np.tile([-np.inf, np.inf], (n_theta, 1))
        if model.p_bounds is not None:
            bounds[:n_flux_theta] = np.tile(model.p_bounds, (n_int, 1))
        if cfg.estimate_x0 and cfg.x0_bounds is not None:
            bounds[n_flux_theta:] = np.asarray(cfg.x0_bounds, dtype=float)

    def unpack(theta):
        p_vals = theta[:n_flux_theta].reshape(n_int, n_p)
        x0 = theta[n_flux_theta:] if cfg.estimate_x0 else x0_init
        return p_vals, x0

    def residual_from_states(states, p_vals):
        z = model.output_map(states[meas_rows])
        e = z - ds.z_meas
        r_fit = np.einsum("jik,ji->jk", lz, e).ravel()
        dp = np.diff(p_vals, axis=0)
        r_reg = np.einsum("kji,kj->ki", lr, dp)  # rows are L_k^T dp_k
        return np.concatenate([r_fit, r_reg.ravel()])

    def residual(theta):
        p_vals, x0 = unpack(theta)
        profile = PiecewiseConstantProfile(disc, p_vals)
        states = rollout(
            model, x0, ds.mv, profile, out_grid, cfg.integrator, step_grid=step_grid
        )
        return residual_from_states(states, p_vals)

    # causality mask: measurement rows at or before an interval's start are
    # unaffected by that interval's flux value
    mask = np.ones((n_meas, n_theta), dtype=bool)
    for k in range(n_int):
        mask[meas.points <= disc.points[k] + 1e-12, k * n_p : (k + 1) * n_p] = False

    def jacobian(theta, r0):
        p_vals, x0 = unpack(theta)
        steps = FD_REL_STEP * np.maximum(np.abs(theta), 1.0)
        thetas = np.tile(theta, (n_theta, 1))
        thetas[np.arange(n_theta), np.arange(n_theta)] += steps
        flux_batch = np.stack([thetas[i, :n_flux_theta].reshape(n_int, n_p)
                               for i in range(n_theta)])
        if cfg.estimate_x0:
            x0_batch = thetas[:, n_flux_theta:]
        else:
            x0_batch = np.tile(x0, (n_theta, 1))
        states = rollout(
            model,
            x0_batch,
            ds.mv,
            EnsembleProfile(disc, flux_batch),
            out_grid,
            cfg.integrator,
            step_grid=step_grid,
        )  # (n_out, n_theta, n_x)
        z = model.output_map(states[meas_rows])  # (n_meas, n_theta, n_z)
        e = z - ds.z_meas[:, None, :]
        r_fit = np.einsum("jik,jmi->jmk", lz, e)  # (n_meas, n_theta, n_z)
        r_fit = r_fit.transpose(0, 2, 1).reshape(n_meas * n_z, n_theta)
        jac = np.empty((r0.size, n_theta))
        jac[: n_meas * n_z] = (r_fit - r0[: n_meas * n_z, None]) / steps
        # regularization rows are linear in theta: exact Jacobian
        jac[n_meas * n_z :] = 0.0
        for k in range(n_int - 1):
            row = n_meas * n_z + k * n_p
            lkt = lr[k].T
            jac[row : row + n_p, (k + 1) * n_p : (k + 2) * n_p] = lkt
            jac[row : row + n_p, k * n_p : (k + 1) * n_p] = -lkt
        fit_mask = np.repeat(mask, n_z, axis=0)
        jac[: n_meas * n_z][~fit_mask] = 0.0
        return jac

    problem = ResidualProblem(
        residual_fn=residual, dim_theta=n_theta, bounds=bounds, jacobian=jacobian
    )
    try:
        report = lm_solve(problem, theta0, cfg.lm)
    except HybridIdError as exc:
        raise EstimationError(f"dataset {ds.dataset_id}: {exc}") from exc

    p_vals, x0 = unpack(report.theta_opt)
    profile = PiecewiseConstantProfile(disc, p_vals)
    states = rollout(
        model, np.asarray(x0), ds.mv, profile, out_grid, cfg.integrator,
        step_grid=step_grid,
    )
    traj = Trajectory(out_grid, states, model.output_map(states))
    fit = fit_value(traj, ds)
    reg = regularization_value(profile, cfg.w_reg)
    resid = traj.outputs[meas_rows] - ds.z_meas
    return EstimateResult(
        p_star=profile,
        x0_star=np.asarray(x0, dtype=float),
        trajectory=traj,
        fit_cost=fit,
        reg_cost=reg,
        per_point_residuals=resid,
        lm_report=report,
        dataset_id=ds.dataset_id,
        mv=ds.mv,
    )
