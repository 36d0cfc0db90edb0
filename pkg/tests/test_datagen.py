import numpy as np
import pytest

from hybridid.core import TimeGrid, constant_profile
from hybridid.datagen import (
    Scenario,
    cstr_scenarios,
    cstr_truth_setup,
    generate_pseudo_data,
    tank_scenarios,
    tank_steady_state,
    tank_truth_setup,
)
from hybridid.errors import HybridIdError
from hybridid.integrate import IntegratorConfig
from hybridid.models import tank_truth_rhs

from conftest import make_decay_model


def _const_scenario(t_end, unit="s"):
    mv = constant_profile(TimeGrid([0.0, t_end], unit=unit), [0.0])
    return Scenario(x0=np.array([1.0]), mv=mv)


class TestGeneratePseudoData:
    def test_zero_noise_is_identity(self, decay_model):
        (ds,) = generate_pseudo_data(
            decay_model, np.zeros(0), [_const_scenario(2.0)],
            meas_period=0.5, noise_frac=0.0, rng_seed=1,
        )
        assert np.allclose(ds.z_meas[:, 0], np.exp(-ds.meas_grid.points), atol=1e-9)

    def test_determinism(self, decay_model):
        args = (
            decay_model, np.zeros(0), [_const_scenario(2.0)],
        )
        a = generate_pseudo_data(*args, meas_period=0.5, noise_frac=0.02, rng_seed=3)
        b = generate_pseudo_data(*args, meas_period=0.5, noise_frac=0.02, rng_seed=3)
        assert np.array_equal(a[0].z_meas, b[0].z_meas)
        assert np.array_equal(a[0].weights, b[0].weights)

    def test_seed_changes_noise(self, decay_model):
        args = (decay_model, np.zeros(0), [_const_scenario(2.0)])
        a = generate_pseudo_data(*args, meas_period=0.5, noise_frac=0.02, rng_seed=3)
        b = generate_pseudo_data(*args, meas_period=0.5, noise_frac=0.02, rng_seed=4)
        assert not np.array_equal(a[0].z_meas, b[0].z_meas)

    def test_noise_std_matches_fraction(self):
        # constant unit signal, 10^4 samples: sample std of the multiplicative
        # noise must land in [0.019, 0.021] for noise_frac = 0.02
        model = make_decay_model(rate=0.0)
        sc = _const_scenario(10_000.0)
        (ds,) = generate_pseudo_data(
            model, np.zeros(0), [sc], meas_period=1.0, noise_frac=0.02,
            rng_seed=11, integrator=IntegratorConfig(max_step=10.0),
        )
        assert ds.z_meas.shape[0] == 10_001
        assert 0.019 <= np.std(ds.z_meas - 1.0) <= 0.021

    def test_empty_scenarios_rejected(self, decay_model):
        with pytest.raises(HybridIdError):
            generate_pseudo_data(
                decay_model, np.zeros(0), [], meas_period=1.0,
                noise_frac=0.0, rng_seed=0,
            )

    def test_negative_noise_rejected(self, decay_model):
        with pytest.raises(HybridIdError):
            generate_pseudo_data(
                decay_model, np.zeros(0), [_const_scenario(1.0)],
                meas_period=0.5, noise_frac=-0.1, rng_seed=0,
            )

    def test_scenario_index_attached_on_failure(self):
        from dataclasses import replace

        def bad_rhs(x, u, p, t):
            return x * x * 1e8

        model = replace(make_decay_model(), rhs_known=bad_rhs)
        sc = Scenario(x0=np.array([1e150]), mv=_const_scenario(5.0).mv)
        with pytest.raises(HybridIdError, match="scenario 0"):
            generate_pseudo_data(
                model, np.zeros(0), [sc], meas_period=1.0,
                noise_frac=0.0, rng_seed=0,
            )


class TestScenarioFactories:
    def test_cstr_scenarios_shapes_and_ranges(self):
        scen = cstr_scenarios(n_scenarios=4, rng_seed=7)
        assert len(scen) == 4
        for s in scen:
            assert s.x0.shape == (3,)
            assert s.mv.dim == 2
            assert np.all(s.mv.values[:, 0] > 0)
            assert np.all((s.mv.values[:, 1] >= 280) & (s.mv.values[:, 1] <= 320))

    def test_tank_scenarios_stay_positive(self):
        scen = tank_scenarios(n_scenarios=3, segment=40.0, rng_seed=7)
        for s in scen:
            assert np.all(s.x0 > 0)
            assert np.all(s.mv.values >= 0)

    def test_scenarios_deterministic(self):
        a = cstr_scenarios(n_scenarios=3, rng_seed=5)
        b = cstr_scenarios(n_scenarios=3, rng_seed=5)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.x0, sb.x0)
            assert np.array_equal(sa.mv.values, sb.mv.values)


class TestTankSteadyState:
    def test_is_an_equilibrium(self):
        x0, u = tank_steady_state(0.5)
        dx = tank_truth_rhs(x0, u)
        # reservoir level changes only through the closed loop of flows,
        # so the three tanks must be exactly stationary
        assert np.allclose(dx[:3], 0.0, atol=1e-12)

    def test_h2_hits_target(self):
        x0, _ = tank_steady_state(0.37)
        assert x0[1] == pytest.approx(0.37)


class TestTruthSetups:
    def test_cstr_setup_consistent(self):
        model, flux = cstr_truth_setup()
        assert model.n_x == 3 and model.n_p == 3
        p = flux(np.array([0.66, 0.5, 350.0]), np.array([0.1, 300.0]), 0.0)
        assert p.shape == (3,)

    def test_tank_setup_consistent(self):
        model, flux = tank_truth_setup()
        assert model.n_x == 4 and model.n_p == 4
        p = flux(np.array([0.8, 0.5, 0.6, 5.0]), np.zeros(2), 0.0)
        assert p.sum() == 0.0
