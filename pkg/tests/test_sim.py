import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridid.core import PiecewiseConstantProfile, TimeGrid, constant_profile
from hybridid.errors import ConfigError, DomainError, IntegrationError
from hybridid.integrate import IntegratorConfig, simulate
from hybridid.models import (
    CstrParams,
    TankParams,
    cstr_reaction_rate,
    cstr_truth_fluxes,
    cstr_truth_rhs,
    tank_flows,
    tank_truth_fluxes,
    tank_truth_rhs,
)

from conftest import dummy_mv, make_decay_model

NO_FLUX = np.zeros(0)


class TestIntegratorConfig:
    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            IntegratorConfig(method="rk45")

    def test_nonpositive_step(self):
        with pytest.raises(ConfigError):
            IntegratorConfig(max_step=0.0)


class TestRk4:
    def test_exp_decay_accuracy(self, decay_model):
        # dx/dt = -x, x0 = 1: analytic solution e^-t
        grid = TimeGrid([0.0, 1.0])
        traj = simulate(
            decay_model, [1.0], dummy_mv(1.0), NO_FLUX, grid,
            IntegratorConfig(max_step=0.01),
        )
        assert abs(traj.states[-1, 0] - np.exp(-1.0)) <= 1e-8

    def test_observed_order_at_least_3p8(self, decay_model):
        errs = []
        for h in (0.1, 0.05, 0.025):
            traj = simulate(
                decay_model, [1.0], dummy_mv(1.0), NO_FLUX,
                TimeGrid([0.0, 1.0]), IntegratorConfig(max_step=h),
            )
            errs.append(abs(traj.states[-1, 0] - np.exp(-1.0)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders >= 3.8)

    def test_subgrid_equals_subsampled_full_grid(self, decay_model):
        cfg = IntegratorConfig(max_step=0.25)
        full = TimeGrid([0.0, 0.5, 1.0, 1.5, 2.0])
        sub = TimeGrid([0.0, 1.0, 2.0])
        t_full = simulate(decay_model, [1.0], dummy_mv(2.0), NO_FLUX, full, cfg)
        t_sub = simulate(decay_model, [1.0], dummy_mv(2.0), NO_FLUX, sub, cfg)
        assert np.array_equal(t_full.states[[0, 2, 4]], t_sub.states)

    def test_blowup_reports_failing_time(self):
        from dataclasses import replace

        def bad_rhs(x, u, p, t):
            return x * x * 1e6  # finite-time blow-up

        model = replace(make_decay_model(), rhs_known=bad_rhs)
        with pytest.raises(IntegrationError):
            simulate(
                model, [1e150], dummy_mv(10.0), NO_FLUX,
                TimeGrid([0.0, 10.0]), IntegratorConfig(max_step=0.1),
            )


class TestImplicitEuler:
    def test_a_stable_on_stiff_decay(self):
        model = make_decay_model(rate=1000.0)
        grid = TimeGrid([0.0, 1.0])
        traj = simulate(
            model, [1.0], dummy_mv(1.0), NO_FLUX,
            TimeGrid(np.linspace(0.0, 1.0, 11)),
            IntegratorConfig(method="implicit-euler", max_step=0.1),
        )
        x = traj.states[:, 0]
        assert np.all(np.isfinite(x))
        # monotone decay with no sign-flipping oscillation, down to the
        # Newton solve tolerance
        assert np.all(np.diff(x) <= 1e-10)
        assert np.all(x >= -1e-10)
        assert abs(x[-1]) < 1e-6


class TestCstrTruth:
    def test_reaction_rate_at_350K(self):
        # 7.2e10 * exp(-8750/350), frozen by direct scalar arithmetic
        assert cstr_reaction_rate(1.0, 350.0) == pytest.approx(
            0.9999319582774095, rel=1e-12
        )

    def test_true_p2(self):
        p = cstr_truth_fluxes(np.array([0.6, 0.5, 350.0]), np.array([0.1, 300.0]))
        assert p[1] == pytest.approx(-0.4999659791387048, rel=1e-12)

    def test_true_p3(self):
        # (-dH/(rho Cp)) * rate * c + (2U/(r rho Cp)) * (Tc - T)
        p = cstr_truth_fluxes(np.array([0.6, 0.5, 350.0]), np.array([0.1, 300.0]))
        assert p[2] == pytest.approx(-0.3701214808884572, rel=1e-10)

    def test_p1_is_zero(self):
        p = cstr_truth_fluxes(np.array([0.6, 0.5, 350.0]), np.array([0.1, 300.0]))
        assert p[0] == 0.0

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            cstr_truth_rhs(np.array([0.0, 0.5, 350.0]), np.array([0.1, 300.0]))
        with pytest.raises(DomainError):
            cstr_truth_rhs(np.array([0.6, 0.5, -1.0]), np.array([0.1, 300.0]))

    def test_constant_level_when_outflow_matches_feed(self):
        # Eq. for h: dh/dt = (F0 - F_out)/A, so F_out = F0 holds the level
        par = CstrParams()
        dx = cstr_truth_rhs(
            np.array([0.66, 0.5, 350.0]), np.array([par.F0, 300.0])
        )
        assert dx[0] == pytest.approx(0.0, abs=1e-15)


class TestTankTruth:
    def test_zero_flow_equilibrium(self):
        dx = tank_truth_rhs(np.zeros(4), np.zeros(2))
        assert np.array_equal(dx, np.zeros(4))

    def test_torricelli_flow(self):
        f12, f23, f3r = tank_flows(np.array([1.0, 0.0, 0.0, 5.0]))
        assert f12 == pytest.approx(0.05)
        assert f23 == 0.0
        assert f3r == 0.0

    def test_negative_holdup_rejected(self):
        with pytest.raises(DomainError):
            tank_truth_rhs(np.array([-0.1, 0.0, 0.0, 5.0]), np.zeros(2))

    @given(
        h=st.lists(st.floats(0.0, 10.0), min_size=4, max_size=4),
        u=st.lists(st.floats(0.0, 0.05), min_size=2, max_size=2),
    )
    def test_mass_conservation_by_construction(self, h, u):
        dx = tank_truth_rhs(np.array(h), np.array(u))
        assert abs(dx.sum()) <= 1e-15

    def test_flux_sum_is_exactly_zero(self):
        p = tank_truth_fluxes(np.array([0.7, 0.5, 0.9, 5.0]))
        assert p.sum() == 0.0


class TestTrajectoryConservation:
    def test_total_mass_conserved_per_step(self):
        from hybridid.datagen import tank_truth_setup

        model, flux = tank_truth_setup()
        grid = TimeGrid(np.arange(0.0, 241.0, 1.0), unit="s")
        mv = constant_profile(
            TimeGrid([0.0, 240.0], unit="s"), [0.02, 0.01]
        )
        traj = simulate(
            model, [0.8, 0.5, 0.6, 5.0], mv, flux, grid,
            IntegratorConfig(max_step=0.5),
        )
        total = traj.states.sum(axis=1)
        assert np.max(np.abs(np.diff(total))) <= 1e-9
