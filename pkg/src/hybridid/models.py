"""Built-in ground-truth systems and their hybrid skeletons.

Two benchmarks are provided:

* A non-isothermal CSTR with level, concentration and temperature states,
  Arrhenius kinetics and jacket cooling. Time unit: minutes. The hybrid
  skeleton keeps only the flow terms and introduces additive fluxes
  p1 (level), p2 (concentration) and p3 (temperature).

* A three-tank water plant connected to a reservoir, with Torricelli-type
  inter-tank flows. Time unit: seconds. The hybrid skeleton keeps the
  inflow terms and introduces additive fluxes p1..p4, one per holdup.

Both expose: truth flux functions (state feedback), a hybrid-structure
ModelStructure, and a closed truth model for pseudo-data generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ModelStructure
from .errors import DomainError

# ---------------------------------------------------------------------------
# CSTR


@dataclass(frozen=True)
class CstrParams:
    """Physical constants of the reactor benchmark (time unit: minutes)."""

    F0: float = 0.1  # feed flow, m^3/min
    T0: float = 350.0  # feed temperature, K
    c0: float = 1.0  # feed concentration, kmol/m^3
    r: float = 0.219  # reactor radius, m
    k0: float = 7.2e10  # rate constant, 1/min
    E_R: float = 8750.0  # activation energy over gas constant, K
    U: float = 54.94  # heat transfer coefficient, kJ/(min m^2 K)
    rho: float = 1000.0  # density, kg/m^3
    Cp: float = 0.239  # heat capacity, kJ/(kg K)
    dH: float = -5.0e4  # reaction enthalpy, kJ/kmol

    @property
    def area(self) -> float:
        return math.pi * self.r**2


CSTR_STATE_NAMES = ("h [m]", "c [kmol/m3]", "T [K]")
CSTR_MV_NAMES = ("F_out [m3/min]", "T_c [K]")
CSTR_FLUX_NAMES = ("p1 [m/min]", "p2 [kmol/(m3 min)]", "p3 [K/min]")


def cstr_reaction_rate(c, T, par: CstrParams = CstrParams()):
    """Arrhenius rate term k0 * c * exp(-E_R / T)."""
    return par.k0 * c * np.exp(-par.E_R / T)


def cstr_truth_fluxes(x, u, t=0.0, par: CstrParams = CstrParams()):
    """True values of the additive fluxes p1..p3 at a state/MV point.

    Broadcasts over a leading batch axis of x (u is shared or batched).
    """
    c, T = x[..., 1], x[..., 2]
    u = np.asarray(u, dtype=float)
    Tc = u[..., 1]
    rate = cstr_reaction_rate(c, T, par)
    p1 = np.zeros_like(c)
    p2 = -rate
    p3 = (-par.dH / (par.rho * par.Cp)) * rate + (
        2.0 * par.U / (par.r * par.rho * par.Cp)
    ) * (Tc - T)
    return np.stack([p1, p2, p3], axis=-1)


def _cstr_rhs_known(x, u, p, t, par: CstrParams):
    h, c, T = x[..., 0], x[..., 1], x[..., 2]
    if np.any(h <= 0.0) or np.any(T <= 0.0):
        raise DomainError(f"CSTR rhs outside domain (needs h > 0, T > 0) at t={t}")
    u = np.asarray(u, dtype=float)
    F_out = u[..., 0]  # T_c enters only through the fluxes
    A = par.area
    dh = (par.F0 - F_out) / A + p[..., 0]
    dc = par.F0 * (par.c0 - c) / (A * h) + p[..., 1]
    dT = par.F0 * (par.T0 - T) / (A * h) + p[..., 2]
    return np.stack([dh, dc, dT], axis=-1)


def _state_outputs(x):
    return x


def cstr_model(par: CstrParams = CstrParams()) -> ModelStructure:
    """Hybrid-structure CSTR: knowns are the flow terms, fluxes are additive."""
    return ModelStructure(
        n_x=3,
        n_u=2,
        n_p=3,
        n_z=3,
        rhs_known=lambda x, u, p, t: _cstr_rhs_known(x, u, p, t, par),
        output_map=_state_outputs,
        state_names=CSTR_STATE_NAMES,
        mv_names=CSTR_MV_NAMES,
        flux_names=CSTR_FLUX_NAMES,
        output_names=CSTR_STATE_NAMES,
        time_unit="min",
        name="cstr",
    )


def cstr_truth_rhs(x, u, par: CstrParams = CstrParams()):
    """Full mechanistic CSTR right-hand side (hybrid knowns + truth fluxes)."""
    p = cstr_truth_fluxes(x, u, par=par)
    return _cstr_rhs_known(x, u, p, 0.0, par)


# ---------------------------------------------------------------------------
# Three-tank plant


@dataclass(frozen=True)
class TankParams:
    """Torricelli outflow coefficients, holdup^(1/2)/s (time unit: seconds)."""

    c12: float = 0.05
    c23: float = 0.05
    c3r: float = 0.05

    def __post_init__(self):
        if min(self.c12, self.c23, self.c3r) < 0:
            raise ValueError("outflow coefficients must be nonnegative")


TANK_STATE_NAMES = ("h1", "h2", "h3", "h_res")
TANK_MV_NAMES = ("F1_in", "F3_in")
TANK_FLUX_NAMES = ("p1", "p2", "p3", "p4")


def tank_flows(x, par: TankParams = TankParams()):
    """Inter-tank flows (F12, F23, F3r) from the Torricelli law."""
    h1, h2, h3 = x[..., 0], x[..., 1], x[..., 2]
    # clamp tiny negatives from roundoff before the square root
    return (
        par.c12 * np.sqrt(np.maximum(h1, 0.0)),
        par.c23 * np.sqrt(np.maximum(h2, 0.0)),
        par.c3r * np.sqrt(np.maximum(h3, 0.0)),
    )


def tank_truth_fluxes(x, u=None, t=0.0, par: TankParams = TankParams()):
    """True additive fluxes p1..p4 of the tank hybrid structure."""
    if np.any(np.asarray(x)[..., :3] < -1e-12):
        raise DomainError(f"tank fluxes need nonnegative holdups at t={t}")
    f12, f23, f3r = tank_flows(x, par)
    return np.stack([-f12, f12 - f23, f23 - f3r, f3r], axis=-1)


def _tank_rhs_known(x, u, p, t):
    if np.any(np.asarray(x)[..., :3] < -1e-12):
        raise DomainError(f"tank rhs needs nonnegative holdups at t={t}")
    u = np.asarray(u, dtype=float)
    f1, f3 = u[..., 0], u[..., 1]
    d1 = f1 + p[..., 0]
    d2 = np.zeros(np.broadcast_shapes(np.shape(f1), p[..., 1].shape)) + p[..., 1]
    d3 = f3 + p[..., 2]
    dres = -f1 - f3 + p[..., 3]
    return np.stack([d1, d2, d3, dres], axis=-1)


def tank_model() -> ModelStructure:
    """Hybrid-structure tank plant: knowns are the metered inflows."""
    return ModelStructure(
        n_x=4,
        n_u=2,
        n_p=4,
        n_z=4,
        rhs_known=_tank_rhs_known,
        output_map=_state_outputs,
        state_names=TANK_STATE_NAMES,
        mv_names=TANK_MV_NAMES,
        flux_names=TANK_FLUX_NAMES,
        output_names=TANK_STATE_NAMES,
        time_unit="s",
        name="three-tank",
    )


def tank_truth_rhs(x, u, par: TankParams = TankParams()):
    """Full truth right-hand side; conserves total holdup exactly."""
    p = tank_truth_fluxes(x, par=par)
    return _tank_rhs_known(x, u, p, 0.0)
