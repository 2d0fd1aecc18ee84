import math

import numpy as np
import pytest
import scipy.linalg as sla

from pmsm_harvest.control_math import (
    NoStabilizingSolutionError,
    UnstableSystemError,
    care_residual,
    closed_loop_moments,
    is_hurwitz,
    solve_care,
    solve_lyapunov,
    spectral_abscissa,
)
from pmsm_harvest.model import disturbance_filter, plant_from_params
from pmsm_harvest.params import PlantParams
from pmsm_harvest.synthesis import ControllerQ


def random_stable_system(rng, n=4, c_scale=0.3):
    M = rng.normal(size=(n, n))
    A = M - (spectral_abscissa(M) + rng.uniform(0.1, 2.0)) * np.eye(n)
    return A, rng.normal(size=(n, 1)), c_scale * rng.normal(size=(1, n))


def hamiltonian(A, B, C, r):
    A0 = A - 0.5 * B @ C / r
    return np.block([[A0, -0.5 * B @ B.T / r], [0.5 * C.T @ C / r, -A0.T]])


# ---------------------------------------------------------------- Riccati


def test_care_zero_output_gives_zero_solution():
    A = np.diag([-1.0, -2.0, -3.0, -4.0])
    sol = solve_care(A, np.ones((4, 1)), np.zeros((1, 4)), 1.0)
    np.testing.assert_allclose(sol.S, 0.0, atol=1e-14)
    np.testing.assert_allclose(sol.H, 0.0, atol=1e-14)


def test_care_scalar_stabilizing_root():
    # -2s - (1/2)(s + 1)^2 = 0  <=>  s^2 + 6s + 1 = 0, roots -3 +- 2 sqrt 2
    s_stab = -3.0 + 2.0 * math.sqrt(2.0)
    h = -0.5 * (s_stab + 1.0)
    assert -1.0 + h < 0  # the other root gives +sqrt(2)
    sol = solve_care(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), 1.0)
    assert sol.S[0, 0] == pytest.approx(s_stab, rel=1e-13)
    assert sol.H[0, 0] == pytest.approx(h, rel=1e-13)
    assert abs(care_residual(sol.S, np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), 1.0)[0, 0]) <= 1e-12


def test_care_on_ideal_plant(params):
    plant = plant_from_params(params, "ideal")
    sol = solve_care(plant.A, plant.B, plant.C, 10.7)
    assert sol.residual_norm <= 1e-10 * max(1.0, np.linalg.norm(sol.S))
    assert spectral_abscissa(plant.A + plant.B @ sol.H) < 0
    np.testing.assert_array_equal(sol.S, sol.S.T)


def test_care_random_systems(rng):
    solved = genuine_failures = 0
    while solved < 100:
        A, B, C = random_stable_system(rng)
        r = rng.uniform(0.5, 2.0)
        try:
            sol = solve_care(A, B, C, r)
        except NoStabilizingSolutionError:
            # only acceptable when the Hamiltonian really touches the imaginary axis
            eig = np.linalg.eigvals(hamiltonian(A, B, C, r))
            assert np.min(np.abs(eig.real)) <= 1e-6 * np.max(np.abs(eig))
            genuine_failures += 1
            continue
        assert sol.residual_norm <= 1e-10 * max(1.0, np.linalg.norm(sol.S))
        assert is_hurwitz(A + B @ sol.H)
        solved += 1
    assert genuine_failures < 20


def test_care_rejects_axis_eigenvalues():
    # undamped oscillator: Hamiltonian eigenvalues on the axis
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(NoStabilizingSolutionError):
        solve_care(A, np.zeros((2, 1)), np.zeros((1, 2)), 1.0)


def test_care_rejects_bad_weight():
    with pytest.raises(ValueError):
        solve_care(-np.eye(2), np.ones((2, 1)), np.ones((1, 2)), 0.0)


# ---------------------------------------------------------------- Lyapunov


def test_lyapunov_scalar():
    assert solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))[0, 0] == pytest.approx(0.5, rel=1e-15)


def test_lyapunov_zero_forcing():
    np.testing.assert_array_equal(solve_lyapunov(-np.eye(3), np.zeros((3, 3))), np.zeros((3, 3)))


def test_lyapunov_bandpass_variance(params):
    A, B = disturbance_filter(params.disturbance)
    sigma = solve_lyapunov(A, B @ B.T)
    # closed-form stationary variance of a second-order bandpass: gain^2 / (4 zeta omega)
    d = params.disturbance
    assert sigma[1, 1] == pytest.approx(d.input_gain**2 / (4 * d.zeta_a * d.omega_a), rel=1e-12)
    assert sigma[1, 1] == pytest.approx(d.sigma_a**2, rel=1e-12)


def test_lyapunov_rejects_unstable():
    with pytest.raises(UnstableSystemError):
        solve_lyapunov(np.eye(2), np.eye(2))


def test_lyapunov_matches_time_domain_integral(rng):
    for _ in range(20):
        A, B, _ = random_stable_system(rng)
        Q = B @ B.T + 0.1 * np.eye(4)
        sigma = solve_lyapunov(A, Q)
        assert np.linalg.norm(A @ sigma + sigma @ A.T + Q) <= 1e-10 * np.linalg.norm(Q)
        # integrate d/dt vec(S) = (I kron A + A kron I) vec(S) + vec(Q) from 0 over 20 time constants
        T = 20.0 / abs(spectral_abscissa(A))
        K = np.kron(np.eye(4), A) + np.kron(A, np.eye(4))
        aug = np.zeros((17, 17))
        aug[:16, :16] = K
        aug[:16, 16] = Q.reshape(-1, order="F")
        integral = sla.expm(aug * T)[:16, 16].reshape(4, 4, order="F")
        np.testing.assert_allclose(integral, sigma, rtol=1e-6, atol=1e-6 * np.linalg.norm(sigma))
        assert np.min(np.linalg.eigvalsh(sigma)) >= 0


# ---------------------------------------------------------------- misc


def test_is_hurwitz():
    assert not is_hurwitz(np.eye(3))
    assert is_hurwitz(-np.eye(3))
    assert is_hurwitz(plant_from_params(PlantParams(), "ideal").A)
    assert not is_hurwitz(np.diag([-1.0, -1e-13]))


def test_open_loop_moments_are_zero(params):
    plant = plant_from_params(params, "ideal")
    mom = closed_loop_moments(plant, ControllerQ.zero(), params.measurement)
    assert mom.eiq2 == 0.0
    assert mom.p_gen_lin == 0.0
    open_loop = solve_lyapunov(plant.A, plant.B_w @ plant.B_w.T)
    assert mom.ex2 == pytest.approx(open_loop[1, 1], rel=1e-10)
    assert np.min(np.linalg.eigvalsh(mom.sigma_cl)) >= -1e-14


def test_moments_reject_unstable_loop(params):
    plant = plant_from_params(params, "ideal")
    K = ControllerQ(np.eye(4), np.zeros((4, 1)), np.zeros((1, 4)))
    with pytest.raises(UnstableSystemError):
        closed_loop_moments(plant, K, params.measurement)
