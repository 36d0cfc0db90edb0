import numpy as np
import pytest
from scipy.linalg import hilbert

from hybridid.errors import HybridIdError, NotPositiveDefiniteError
from hybridid.nls import (
    LmConfig,
    ResidualProblem,
    fd_jacobian,
    lm_solve,
    solve_spd,
)


class TestSolveSpd:
    def test_identity(self):
        b = np.array([3.0, -1.0, 2.5])
        assert np.array_equal(solve_spd(np.eye(3), b), b)

    def test_hand_elimination_oracle(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        b = np.array([2.0, 5.0])
        assert np.allclose(solve_spd(A, b), [-0.5, 2.0], atol=1e-12)

    def test_hilbert_constructed_solution(self):
        A = hilbert(4)
        x_true = np.ones(4)
        x = solve_spd(A, A @ x_true)
        assert np.allclose(x, x_true, atol=1e-7)

    def test_residual_bound(self):
        rng = np.random.default_rng(0)
        M = rng.standard_normal((6, 6))
        A = M @ M.T + 6 * np.eye(6)
        b = rng.standard_normal(6)
        x = solve_spd(A, b)
        assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)

    def test_non_pd_signalled(self):
        with pytest.raises(NotPositiveDefiniteError):
            solve_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([1.0, 1.0]))


def _linear_problem(A, b, bounds=None):
    return ResidualProblem(
        residual_fn=lambda th: A @ th - b, dim_theta=A.shape[1], bounds=bounds
    )


class TestLmSolve:
    def test_diagonal_linear_exact(self):
        A = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([1.0, 2.0])
        rep = lm_solve(_linear_problem(A, b), np.zeros(2), LmConfig())
        assert np.allclose(rep.theta_opt, [1.0, 1.0], atol=1e-8)
        assert rep.cost <= 1e-16

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((12, 4))
        b = rng.standard_normal(12)
        rep = lm_solve(_linear_problem(A, b), np.zeros(4), LmConfig())
        x_ne = np.linalg.solve(A.T @ A, A.T @ b)
        assert np.linalg.norm(rep.theta_opt - x_ne) <= 1e-8 * np.linalg.norm(x_ne)

    def test_rosenbrock_residuals(self):
        prob = ResidualProblem(
            residual_fn=lambda th: np.array(
                [1.0 - th[0], 10.0 * (th[1] - th[0] ** 2)]
            ),
            dim_theta=2,
        )
        rep = lm_solve(prob, np.array([-1.2, 1.0]), LmConfig(max_iter=500))
        assert np.allclose(rep.theta_opt, [1.0, 1.0], atol=1e-6)

    def test_box_projected_optimum(self):
        A = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([1.0, 2.0])
        bounds = np.array([[0.0, 0.5], [0.0, 0.5]])
        rep = lm_solve(_linear_problem(A, b, bounds), np.zeros(2), LmConfig())
        # separable quadratic: the box-constrained optimum is the clamp of
        # the unconstrained optimum (verified independently by grid search)
        assert np.allclose(rep.theta_opt, [0.5, 0.5], atol=1e-6)

    def test_theta0_projected_into_bounds(self):
        A = np.eye(2)
        b = np.array([10.0, 10.0])
        bounds = np.array([[0.0, 1.0], [0.0, 1.0]])
        rep = lm_solve(
            _linear_problem(A, b, bounds), np.array([5.0, -5.0]), LmConfig()
        )
        assert np.all(rep.theta_opt >= 0.0) and np.all(rep.theta_opt <= 1.0)
        assert np.allclose(rep.theta_opt, [1.0, 1.0], atol=1e-8)

    def test_cost_history_nonincreasing(self):
        prob = ResidualProblem(
            residual_fn=lambda th: np.array(
                [1.0 - th[0], 10.0 * (th[1] - th[0] ** 2)]
            ),
            dim_theta=2,
        )
        rep = lm_solve(prob, np.array([-1.2, 1.0]), LmConfig(max_iter=500))
        hist = np.asarray(rep.cost_history)
        assert np.all(np.diff(hist) <= 1e-15)

    def test_scaling_equivariance(self):
        def make(c):
            return ResidualProblem(
                residual_fn=lambda th: c
                * np.array([1.0 - th[0], 10.0 * (th[1] - th[0] ** 2)]),
                dim_theta=2,
            )

        r1 = lm_solve(make(1.0), np.array([-1.2, 1.0]), LmConfig(max_iter=500))
        r5 = lm_solve(make(5.0), np.array([-1.2, 1.0]), LmConfig(max_iter=500))
        assert np.allclose(r1.theta_opt, r5.theta_opt, atol=1e-5)

    def test_failing_initial_point_unrecoverable(self):
        from hybridid.errors import IntegrationError

        def residual(th):
            raise IntegrationError("state blew up", t=0.0)

        prob = ResidualProblem(residual_fn=residual, dim_theta=1)
        with pytest.raises(HybridIdError, match="initial point"):
            lm_solve(prob, np.zeros(1), LmConfig())

    def test_termination_reason_recorded(self):
        A = np.eye(2)
        rep = lm_solve(_linear_problem(A, np.zeros(2)), np.zeros(2), LmConfig())
        assert rep.termination_reason in ("gradient", "step", "cost", "max_iter")

    def test_lm_config_validation(self):
        with pytest.raises(HybridIdError):
            LmConfig(lambda_up=0.5)  # must exceed 1
        with pytest.raises(HybridIdError):
            LmConfig(lambda_down=2.0)  # must be below 1


class TestFdJacobian:
    def test_matches_analytic_on_quadratic(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])

        def residual(th):
            return np.array([th @ Q @ th, th[0] - th[1]])

        theta = np.array([0.7, -0.3])
        J_fd = fd_jacobian(residual, theta)
        J_true = np.vstack([2 * Q @ theta, [1.0, -1.0]])
        # forward differences: truncation error ~ step * |f''|
        assert np.allclose(J_fd, J_true, rtol=1e-5, atol=1e-6)

    def test_user_jacobian_used_by_solver(self):
        A = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([1.0, 2.0])
        calls = {"n": 0}

        def jac(th, r0):
            calls["n"] += 1
            return A

        prob = ResidualProblem(
            residual_fn=lambda th: A @ th - b, dim_theta=2, jacobian=jac
        )
        rep = lm_solve(prob, np.zeros(2), LmConfig())
        assert calls["n"] >= 1
        assert np.allclose(rep.theta_opt, [1.0, 1.0], atol=1e-8)
