"""Step 2: concatenated flux table and Pearson correlation screening.

Each flux discretization interval contributes one row, sampled at the
interval midpoint: states from the stored optimal trajectory, MVs from the
known profile, fluxes from the estimated interval value. Screening keeps,
for each flux, the state/MV columns whose absolute Pearson correlation
meets the threshold; fluxes with no selected inputs are recommended as
constants at their table mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import ModelStructure
from .errors import ConsistencyError, HybridIdError
from .estimate import EstimateResult

CONSTANT_COLUMN_STD = 1e-12


@dataclass(frozen=True)
class FluxTable:
    columns: Tuple[str, ...]  # state names ++ MV names ++ flux names
    data: np.ndarray  # (n_rows, n_cols)
    provenance: Tuple[Tuple[str, int], ...]  # (dataset id, interval index)
    n_states: int = 0
    n_mvs: int = 0
    n_fluxes: int = 0

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def input_columns(self) -> Tuple[str, ...]:
        return self.columns[: self.n_states + self.n_mvs]

    @property
    def flux_columns(self) -> Tuple[str, ...]:
        return self.columns[self.n_states + self.n_mvs :]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]


@dataclass(frozen=True)
class CorrelationReport:
    columns: Tuple[str, ...]
    matrix: np.ndarray
    tau: float
    selected_inputs: Dict[str, List[str]]
    constant_flux_flags: Dict[str, float]  # flux name -> mean value
    constant_columns: Tuple[str, ...] = ()


def build_flux_table(
    results: Sequence[EstimateResult], model: ModelStructure
) -> FluxTable:
    """Concatenate (x*, u, p*) midpoint records across all datasets."""
    cols = tuple(model.state_names) + tuple(model.mv_names) + tuple(model.flux_names)
    rows, prov, dropped = [], [], 0
    for res in results:
        disc = res.p_star.grid
        mids = 0.5 * (disc.points[:-1] + disc.points[1:])
        for k, tm in enumerate(mids):
            x = res.trajectory.state_at(tm)
            u = res.mv(tm)
            row = np.concatenate([x, u, res.p_star.values[k]])
            if not np.all(np.isfinite(row)):
                dropped += 1
                continue
            rows.append(row)
            prov.append((res.dataset_id, k))
    if not rows:
        raise ConsistencyError("flux table is empty")
    return FluxTable(
        columns=cols,
        data=np.array(rows),
        provenance=tuple(prov),
        n_states=model.n_x,
        n_mvs=model.n_u,
        n_fluxes=model.n_p,
    )


def pearson_matrix(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pearson correlation over columns; constant columns get zero rows.

    Returns (matrix, constant_column_mask).
    """
    if data.shape[0] < 2:
        raise HybridIdError("need at least 2 rows for correlation analysis")
    centered = data - data.mean(axis=0)
    std = np.sqrt((centered**2).mean(axis=0))
    const = std < CONSTANT_COLUMN_STD
    safe = np.where(const, 1.0, std)
    normed = centered / safe
    m = (normed.T @ normed) / data.shape[0]
    m[const, :] = 0.0
    m[:, const] = 0.0
    idx = np.where(~const)[0]
    m[idx, idx] = 1.0
    return np.clip(m, -1.0, 1.0), const


def correlation_report(table: FluxTable, tau: float) -> CorrelationReport:
    """Full screening: correlation matrix plus per-flux input selection."""
    if not (0.0 < tau <= 1.0):
        raise HybridIdError("threshold tau must lie in (0, 1]")
    matrix, const = pearson_matrix(table.data)
    selected, constants = select_inputs(table, matrix, tau)
    return CorrelationReport(
        columns=table.columns,
        matrix=matrix,
        tau=tau,
        selected_inputs=selected,
        constant_flux_flags=constants,
        constant_columns=tuple(np.array(table.columns)[const]),
    )


def select_inputs(
    table: FluxTable, matrix: np.ndarray, tau: float
) -> Tuple[Dict[str, List[str]], Dict[str, float]]:
    """Threshold |r| >= tau per flux against state/MV columns only."""
    n_in = table.n_states + table.n_mvs
    selected: Dict[str, List[str]] = {}
    constants: Dict[str, float] = {}
    for j, flux in enumerate(table.flux_columns):
        col = n_in + j
        picks = [
            table.columns[i] for i in range(n_in) if abs(matrix[i, col]) >= tau
        ]
        selected[flux] = picks
        if not picks:
            constants[flux] = float(table.column(flux).mean())
    return selected, constants
