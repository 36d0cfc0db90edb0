"""Shared domain types: time grids, piecewise-constant profiles, trajectories,
measurement datasets, and the model-structure contract.

All types are immutable after construction and safe to share across threads.
Time units are carried as metadata tags ("min" for the reactor case, "s" for
the tank plant) and are never converted implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ConsistencyError, RangeError

_PSD_TOL = 1e-10


def _as_readonly(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing sequence of time points with a unit tag."""

    points: np.ndarray
    unit: str = "s"

    def __post_init__(self):
        pts = _as_readonly(self.points)
        if pts.ndim != 1 or pts.size < 2:
            raise ConfigError("time grid needs at least 2 points")
        if not np.all(np.diff(pts) > 0):
            raise ConfigError("time grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.size

    @property
    def t0(self) -> float:
        return float(self.points[0])

    @property
    def t_end(self) -> float:
        return float(self.points[-1])

    def interval_index(self, t: float) -> int:
        """Index k such that t lies in [points[k], points[k+1]); the terminal
        point maps to the last interval."""
        pts = self.points
        if t < pts[0] or t > pts[-1]:
            raise RangeError(
                f"time {t} outside grid span [{pts[0]}, {pts[-1]}] ({self.unit})"
            )
        k = int(np.searchsorted(pts, t, side="right")) - 1
        return min(k, pts.size - 2)

    def refine(self, max_step: float) -> "TimeGrid":
        return grid_refine(self, max_step)


def grid_refine(grid: TimeGrid, max_step: float) -> TimeGrid:
    """Uniformly subdivide every interval longer than `max_step`.

    The result contains every original point; inserted points split each
    interval into equal substeps.
    """
    if max_step <= 0:
        raise ConfigError("max_step must be positive")
    pts = grid.points
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n_sub = int(np.ceil((b - a) / max_step - 1e-12))
        n_sub = max(n_sub, 1)
        for j in range(1, n_sub):
            out.append(a + (b - a) * j / n_sub)
        out.append(b)
    return TimeGrid(np.array(out), unit=grid.unit)


def grid_union(*grids: TimeGrid) -> TimeGrid:
    """Sorted union of several grids (which must share a unit)."""
    units = {g.unit for g in grids}
    if len(units) != 1:
        raise ConfigError(f"cannot union grids with mixed units {units}")
    pts = np.unique(np.concatenate([g.points for g in grids]))
    # collapse near-duplicates from floating-point arithmetic
    keep = np.concatenate([[True], np.diff(pts) > 1e-12])
    return TimeGrid(pts[keep], unit=units.pop())


@dataclass(frozen=True)
class PiecewiseConstantProfile:
    """One constant vector per grid interval; value(t) is right-continuous
    except at the terminal point, which takes the last interval's value."""

    grid: TimeGrid
    values: np.ndarray  # (n_intervals, dim)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != len(self.grid) - 1:
            raise ConfigError(
                f"profile has {vals.shape[0]} values for "
                f"{len(self.grid) - 1} grid intervals"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.grid.interval_index(t)]

    def with_values(self, values: np.ndarray) -> "PiecewiseConstantProfile":
        return PiecewiseConstantProfile(self.grid, values)


def profile_eval(profile: PiecewiseConstantProfile, t: float) -> np.ndarray:
    """Evaluate a piecewise-constant profile at time t."""
    return profile(t)


def constant_profile(grid: TimeGrid, value) -> PiecewiseConstantProfile:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    vals = np.tile(value, (len(grid) - 1, 1))
    return PiecewiseConstantProfile(grid, vals)


@dataclass(frozen=True)
class Trajectory:
    """States (and optionally outputs) sampled on a time grid."""

    grid: TimeGrid
    states: np.ndarray  # (n_points, n_x)
    outputs: Optional[np.ndarray] = None  # (n_points, n_z)

    def __post_init__(self):
        st = _as_readonly(self.states)
        if st.ndim != 2 or st.shape[0] != len(self.grid):
            raise ConfigError("trajectory states must have one row per grid point")
        object.__setattr__(self, "states", st)
        if self.outputs is not None:
            out = _as_readonly(self.outputs)
            if out.shape[0] != len(self.grid):
                raise ConfigError("trajectory outputs must have one row per grid point")
            object.__setattr__(self, "outputs", out)

    def state_at(self, t: float) -> np.ndarray:
        """State at a grid time (linear interpolation between grid points)."""
        pts = self.grid.points
        if t < pts[0] or t > pts[-1]:
            raise ConsistencyError(f"time {t} not covered by trajectory grid")
        return np.array(
            [np.interp(t, pts, self.states[:, i]) for i in range(self.states.shape[1])]
        )

    def rows_at(self, times: np.ndarray) -> np.ndarray:
        """Row indices of the given times, which must all be grid points."""
        idx = np.searchsorted(self.grid.points, times)
        idx = np.clip(idx, 0, len(self.grid) - 1)
        if not np.allclose(self.grid.points[idx], times, rtol=0, atol=1e-9):
            missing = times[~np.isclose(self.grid.points[idx], times, rtol=0, atol=1e-9)]
            raise ConsistencyError(f"times {missing[:3]}... not on trajectory grid")
        return idx


def check_psd(w: np.ndarray, tol: float = _PSD_TOL) -> None:
    if not np.allclose(w, w.T, atol=tol):
        raise ConfigError("weight matrix is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (w + w.T))
    if eig.min() < -tol:
        raise ConfigError(f"weight matrix has negative eigenvalue {eig.min():.3e}")


@dataclass(frozen=True)
class MeasurementDataset:
    """Noisy outputs of one experiment plus its known MV profile.

    weights holds one symmetric PSD N_z x N_z matrix per measurement time.
    """

    meas_grid: TimeGrid
    z_meas: np.ndarray  # (n_meas, n_z)
    weights: np.ndarray  # (n_meas, n_z, n_z)
    mv: PiecewiseConstantProfile
    x0_guess: np.ndarray
    output_names: Sequence[str] = ()
    mv_names: Sequence[str] = ()
    dataset_id: str = ""

    def __post_init__(self):
        z = _as_readonly(self.z_meas)
        if z.ndim != 2 or z.shape[0] != len(self.meas_grid):
            raise ConfigError("z_meas must have one row per measurement time")
        object.__setattr__(self, "z_meas", z)
        w = _as_readonly(self.weights)
        if w.shape != (z.shape[0], z.shape[1], z.shape[1]):
            raise ConfigError("weights must be (n_meas, n_z, n_z)")
        object.__setattr__(self, "weights", w)
        check_psd(w[0])
        check_psd(w[-1])
        object.__setattr__(self, "x0_guess", _as_readonly(self.x0_guess))

    @property
    def n_meas(self) -> int:
        return len(self.meas_grid)

    @property
    def n_z(self) -> int:
        return self.z_meas.shape[1]


def diagonal_weights(sigma: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-point diagonal weight matrices 1/sigma^2 from per-sample noise
    standard deviations sigma (n_meas, n_z); variances are floored."""
    var = np.maximum(np.asarray(sigma, dtype=float) ** 2, floor)
    n_meas, n_z = var.shape
    w = np.zeros((n_meas, n_z, n_z))
    idx = np.arange(n_z)
    w[:, idx, idx] = 1.0 / var
    return w


@dataclass(frozen=True)
class ModelStructure:
    """Evaluator contract for the known mechanistic part of a hybrid model.

    rhs_known(x, u, p, t) returns dx/dt from the known terms plus the flux
    entries p; it must broadcast over a leading batch axis of x and p and
    raise DomainError (rather than crash) on domain violations such as a
    non-positive level. output_map(x) maps states to outputs and broadcasts
    the same way.
    """

    n_x: int
    n_u: int
    n_p: int
    n_z: int
    rhs_known: Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]
    output_map: Callable[[np.ndarray], np.ndarray]
    state_names: Sequence[str] = ()
    mv_names: Sequence[str] = ()
    flux_names: Sequence[str] = ()
    output_names: Sequence[str] = ()
    time_unit: str = "s"
    p_bounds: Optional[np.ndarray] = None  # (n_p, 2) lower/upper
    name: str = "model"

    def __post_init__(self):
        if self.p_bounds is not None:
            pb = _as_readonly(self.p_bounds)
            if pb.shape != (self.n_p, 2):
                raise ConfigError("p_bounds must be (n_p, 2)")
            object.__setattr__(self, "p_bounds", pb)
