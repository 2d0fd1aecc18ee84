"""Dense linear-algebra kernels for the harvesting synthesis.

The Riccati solver handles the sign-indefinite quadratic form that arises when
the objective is generated power rather than a positive cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

HURWITZ_TOL = 1e-12
#: relative distance to the imaginary axis below which a Hamiltonian eigenvalue counts as on it
AXIS_TOL = 1e-8


class NoStabilizingSolutionError(np.linalg.LinAlgError):
    pass


class UnstableSystemError(ValueError):
    pass


def spectral_abscissa(A) -> float:
    return float(np.max(np.linalg.eigvals(np.asarray(A, float)).real))


def is_hurwitz(A) -> bool:
    return spectral_abscissa(A) < -HURWITZ_TOL


@dataclass(frozen=True)
class RiccatiSolution:
    S: np.ndarray
    H: np.ndarray
    residual_norm: float

    def residual(self, A, B, C, R_coef) -> np.ndarray:
        return care_residual(self.S, A, B, C, R_coef)


def care_residual(S, A, B, C, R_coef) -> np.ndarray:
    G = S @ B + C.T
    return A.T @ S + S @ A - 0.5 * (G @ G.T) / R_coef


def solve_care(A, B, C, R_coef: float) -> RiccatiSolution:
    """Stabilizing solution of A'S + SA - (1/2)(SB + C')R^-1(B'S + C) = 0.

    Returns ``S`` with the optimal state-feedback gain
    ``H = -(1/2) R^-1 (B'S + C)``, via the ordered real Schur form of the
    Hamiltonian.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    C = np.asarray(C, float).reshape(-1, A.shape[0])
    if not R_coef > 0:
        raise ValueError("R_coef must be positive")
    n = A.shape[0]
    A0 = A - 0.5 * (B @ C) / R_coef
    G = 0.5 * (B @ B.T) / R_coef
    Q0 = -0.5 * (C.T @ C) / R_coef
    ham = np.block([[A0, -G], [-Q0, -A0.T]])
    eig = np.linalg.eigvals(ham)
    scale = max(1.0, float(np.max(np.abs(eig))))
    if np.min(np.abs(eig.real)) <= AXIS_TOL * scale:
        raise NoStabilizingSolutionError("Hamiltonian has eigenvalues on the imaginary axis")
    T, Z, sdim = sla.schur(ham, output="real", sort="lhp")
    if sdim != n:
        raise NoStabilizingSolutionError(f"stable subspace has dimension {sdim}, expected {n}")
    U1, U2 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(U1) > 1e12:
        raise NoStabilizingSolutionError("stable invariant subspace is not a graph")
    S = np.linalg.solve(U1.T, U2.T).T
    S = 0.5 * (S + S.T)
    H = -0.5 * (B.T @ S + C) / R_coef
    if not is_hurwitz(A + B @ H):
        raise NoStabilizingSolutionError("closed loop A + BH is not Hurwitz")
    res = float(np.linalg.norm(care_residual(S, A, B, C, R_coef)))
    return RiccatiSolution(S, H, res)


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve A Sigma + Sigma A' + Q = 0 for Hurwitz ``A`` (Bartels-Stewart).

    ``A`` is diagonally balanced first; closed loops mixing slow mechanical
    states with fast controller states otherwise lose about a digit.
    """
    A = np.asarray(A, float)
    Q = np.asarray(Q, float)
    if not is_hurwitz(A):
        raise UnstableSystemError("Lyapunov solve needs a Hurwitz matrix")
    if not np.any(Q):
        return np.zeros_like(Q)
    _, (d, _perm) = sla.matrix_balance(A, permute=False, separate=True)
    outer = np.outer(d, d)
    sigma = sla.solve_continuous_lyapunov(A * d[None, :] / d[:, None], -Q / outer) * outer
    return 0.5 * (sigma + sigma.T)


def lyapunov_residual(A, sigma, Q) -> float:
    return float(np.linalg.norm(A @ sigma + sigma @ A.T + Q))


@dataclass(frozen=True)
class ClosedLoopMoments:
    sigma_cl: np.ndarray
    ex2: float
    eiq2: float
    p_gen_lin: float


def closed_loop_matrices(A, B, B_w, C_y, controller, phi_n, include_measurement_noise=True):
    """Closed-loop drift and noise covariance for plant + strictly proper controller.

    State order is ``[xi, x_K]``; the measurement noise enters only through B_K.
    """
    A_K, B_K, C_K = controller.A_K, controller.B_K, controller.C_K
    n, nk = A.shape[0], A_K.shape[0]
    A_cl = np.block([[A, B @ C_K], [B_K @ C_y, A_K]])
    Bw_cl = np.vstack([B_w, np.zeros((nk, B_w.shape[1]))])
    W = Bw_cl @ Bw_cl.T
    if include_measurement_noise:
        Bn = np.vstack([np.zeros((n, B_K.shape[1])), B_K])
        W = W + Bn @ np.atleast_2d(phi_n) @ Bn.T
    return A_cl, W


def closed_loop_moments(plant, controller, meas, include_measurement_noise: bool = True):
    """Exact stationary moments of the linear closed loop with i_d = 0.

    Mean generated power is -(3/2)(R E{i_q^2} + C E{xi i_q}).
    """
    A_cl, W = closed_loop_matrices(
        plant.A, plant.B, plant.B_w, meas.C_y, controller, meas.phi_n, include_measurement_noise
    )
    if not is_hurwitz(A_cl):
        raise UnstableSystemError("closed loop is not Hurwitz")
    sigma = solve_lyapunov(A_cl, W)
    n = plant.A.shape[0]
    cv = np.hstack([plant.C_v, np.zeros((1, controller.A_K.shape[0]))])
    ci = np.hstack([np.zeros((1, n)), controller.C_K])
    cp = np.hstack([plant.C, np.zeros((1, controller.A_K.shape[0]))])
    ex2 = (cv @ sigma @ cv.T).item()
    eiq2 = (ci @ sigma @ ci.T).item()
    cross = (cp @ sigma @ ci.T).item()
    p_gen = -1.5 * (plant.R * eiq2 + cross)
    return ClosedLoopMoments(sigma, ex2, eiq2, p_gen)

