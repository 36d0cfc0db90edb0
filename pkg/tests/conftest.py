"""Shared builders for small synthetic models used across the test suite."""

import numpy as np
import pytest

from hybridid.core import (
    ModelStructure,
    PiecewiseConstantProfile,
    TimeGrid,
    constant_profile,
)


def identity_outputs(states):
    return np.asarray(states, dtype=float)


def make_decay_model(rate=1.0):
    """dx/dt = -rate * x, no MVs beyond a dummy, no fluxes."""

    def rhs(x, u, p, t):
        return -rate * x

    return ModelStructure(
        n_x=1, n_u=1, n_p=0, n_z=1,
        rhs_known=rhs,
        output_map=identity_outputs,
        state_names=("x",),
        mv_names=("u",),
        flux_names=(),
        output_names=("x",),
        time_unit="s",
        name="decay",
    )


def make_flux_model(n_p=1):
    """dx/dt = p (one state driven directly by its flux), x measured."""

    def rhs(x, u, p, t):
        return np.asarray(p[:1], dtype=float)

    return ModelStructure(
        n_x=1, n_u=1, n_p=n_p, n_z=1,
        rhs_known=rhs,
        output_map=identity_outputs,
        state_names=("x",),
        mv_names=("u",),
        flux_names=tuple(f"p{i + 1}" for i in range(n_p)),
        output_names=("x",),
        time_unit="s",
        name="flux-driven",
    )


def dummy_mv(t_end, unit="s"):
    return constant_profile(TimeGrid([0.0, t_end], unit=unit), [0.0])


@pytest.fixture
def decay_model():
    return make_decay_model()


@pytest.fixture
def flux_model():
    return make_flux_model()


def profile(points, values, unit="s"):
    return PiecewiseConstantProfile(
        TimeGrid(points, unit=unit), np.atleast_2d(np.asarray(values, float))
    )
