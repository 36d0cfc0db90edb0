"""Step 4: assemble, simulate, and score the hybrid model.

A HybridModel closes the mechanistic structure by binding every flux index
either to a trained Mlp (fed by named state/MV columns) or to a constant.
The closed model simulates exactly like the truth models do: the bindings
form a state-feedback flux callable p = f(x, u, t) that the integrator
evaluates at every substep.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    MeasurementDataset,
    ModelStructure,
    PiecewiseConstantProfile,
    TimeGrid,
    Trajectory,
)
from .errors import ConfigError, ConsistencyError, HybridIdError
from .estimate import EstimateResult, fit_value
from .integrate import IntegratorConfig, simulate
from .mlp import Mlp, mlp_forward


@dataclass(frozen=True)
class Constant:
    """A flux pinned to a fixed value (e.g. a screened-out flux)."""

    value: float


@dataclass(frozen=True)
class MlpBinding:
    """A flux computed by a trained network from named state/MV columns."""

    net: Mlp
    inputs: Tuple[str, ...]
    # optional extrapolation guard; outputs are clipped into [lo, hi]
    output_bounds: Optional[Tuple[float, float]] = None


FluxBinding = Union[Constant, MlpBinding]


def _resolve_columns(
    model: ModelStructure, names: Sequence[str]
) -> List[Tuple[str, int]]:
    """Map input names to ("x"|"u", index) pairs against the base model."""
    out = []
    for nm in names:
        if nm in model.state_names:
            out.append(("x", tuple(model.state_names).index(nm)))
        elif nm in model.mv_names:
            out.append(("u", tuple(model.mv_names).index(nm)))
        else:
            raise ConfigError(
                f"flux-map input {nm!r} is neither a state nor an MV of "
                f"{model.name!r}"
            )
    return out


@dataclass(frozen=True)
class HybridModel:
    """Mechanistic base plus one binding per flux index."""

    base: ModelStructure
    bindings: Tuple[FluxBinding, ...]
    time_unit: str = ""

    def __post_init__(self):
        if len(self.bindings) != self.base.n_p:
            raise ConfigError(
                f"{len(self.bindings)} bindings for {self.base.n_p} fluxes"
            )
        for j, b in enumerate(self.bindings):
            if isinstance(b, MlpBinding):
                if len(b.inputs) != b.net.n_in:
                    raise ConfigError(
                        f"flux {j}: {len(b.inputs)} inputs bound to a "
                        f"{b.net.n_in}-input network"
                    )
                _resolve_columns(self.base, b.inputs)  # name check
            elif not isinstance(b, Constant):
                raise ConfigError(f"flux {j}: unsupported binding {type(b)}")
        if not self.time_unit:
            object.__setattr__(self, "time_unit", self.base.time_unit)

    def flux_fn(self):
        """State-feedback callable p = f(x, u, t) for the integrator.

        Broadcasts over a leading batch axis of x (with u either shared or
        batched alongside), so ensemble rollouts work unchanged.
        """
        base = self.base
        plans = []  # per flux: ("const", value) or ("mlp", net, cols, bounds)
        for b in self.bindings:
            if isinstance(b, Constant):
                plans.append(("const", float(b.value), None, None))
            else:
                cols = _resolve_columns(base, b.inputs)
                plans.append(("mlp", b.net, cols, b.output_bounds))

        def fn(x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            lead = x.shape[:-1]
            p = np.empty(lead + (base.n_p,))
            for j, (kind, a, cols, bnd) in enumerate(plans):
                if kind == "const":
                    p[..., j] = a
                    continue
                feats = np.empty(lead + (len(cols),))
                for i, (src, idx) in enumerate(cols):
                    if src == "x":
                        feats[..., i] = x[..., idx]
                    else:
                        feats[..., i] = np.broadcast_to(u, lead + (base.n_u,))[
                            ..., idx
                        ]
                val = mlp_forward(a, feats)[..., 0]
                if bnd is not None:
                    val = np.clip(val, bnd[0], bnd[1])
                p[..., j] = val
            return p

        return fn


def assemble_hybrid(
    model: ModelStructure,
    report,
    trained: Mapping[str, Mlp],
    constants: Mapping[str, float],
    output_bounds: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> HybridModel:
    """Close the model: each flux name gets a network or a constant.

    report is the screening outcome — a CorrelationReport or a plain
    mapping flux name -> selected input columns. Every flux of the model
    must appear in exactly one of trained/constants.
    """
    selected_inputs = getattr(report, "selected_inputs", report)
    output_bounds = output_bounds or {}
    bindings: List[FluxBinding] = []
    for nm in model.flux_names:
        in_trained, in_const = nm in trained, nm in constants
        if in_trained and in_const:
            raise ConfigError(f"flux {nm!r} bound twice")
        if in_trained:
            if nm not in selected_inputs:
                raise ConfigError(f"flux {nm!r} trained but has no selected inputs")
            bindings.append(
                MlpBinding(
                    net=trained[nm],
                    inputs=tuple(selected_inputs[nm]),
                    output_bounds=output_bounds.get(nm),
                )
            )
        elif in_const:
            bindings.append(Constant(float(constants[nm])))
        else:
            raise ConfigError(f"flux {nm!r} is unbound")
    return HybridModel(base=model, bindings=tuple(bindings))


def simulate_hybrid(
    hm: HybridModel,
    x0: np.ndarray,
    mv: PiecewiseConstantProfile,
    out_grid: TimeGrid,
    cfg: IntegratorConfig,
) -> Trajectory:
    """Forward-simulate the closed model; same contract as simulate()."""
    return simulate(hm.base, x0, mv, hm.flux_fn(), out_grid, cfg)


@dataclass
class HybridEvaluation:
    """Per-dataset weighted fit of the hybrid against Step-1 fit values."""

    dataset_id: str
    fit: Optional[float]  # None when the simulation failed
    step1_fit: Optional[float]
    error: Optional[str] = None

    @property
    def delta(self) -> Optional[float]:
        if self.fit is None or self.step1_fit is None:
            return None
        return self.fit - self.step1_fit


def evaluate_hybrid(
    hm: HybridModel,
    datasets: Sequence[MeasurementDataset],
    mvs: Sequence[PiecewiseConstantProfile],
    cfg: IntegratorConfig,
    step1: Optional[Sequence[EstimateResult]] = None,
) -> List[HybridEvaluation]:
    """Re-simulate each original dataset with the hybrid and score it.

    The weighted deviation may move in either direction versus Step 1;
    failures are reported per dataset and do not stop the others.
    """
    if len(mvs) != len(datasets):
        raise ConfigError("one MV profile per dataset required")
    if step1 is not None and len(step1) != len(datasets):
        raise ConfigError("one Step-1 result per dataset required")
    out = []
    for i, ds in enumerate(datasets):
        ref = step1[i].fit_cost if step1 is not None else None
        try:
            traj = simulate_hybrid(hm, ds.x0_guess, mvs[i], ds.meas_grid, cfg)
            out.append(HybridEvaluation(ds.dataset_id, fit_value(traj, ds), ref))
        except HybridIdError as exc:
            out.append(HybridEvaluation(ds.dataset_id, None, ref, error=str(exc)))
    return out
