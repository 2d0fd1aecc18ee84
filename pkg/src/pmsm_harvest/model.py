"""Harvester plant physics.

Covers the nonlinear transducer force mapping (viscous/inertial rotor terms,
screw efficiency and Coulomb friction with sticking), the dq electrical
relations, the Clarke/Park transform, the bus-voltage current-feasibility disc
and the augmented 4-state plant ``xi = [x, xdot, d, a]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numba
import numpy as np

from .params import BusParams, DisturbanceParams, MechParams, PlantParams, TransducerParams

Mode = Literal["ideal", "backdriven"]

#: velocities below this magnitude are treated as exactly zero when picking a force branch
STICK_VELOCITY = 1e-9

_TWO_PI_3 = 2.0 * math.pi / 3.0


class InfeasibleSpeedError(ValueError):
    """No q-axis current can satisfy the bus-voltage disc at this velocity."""


# ---------------------------------------------------------------------------
# mechanical


def effective_inertia(mech: MechParams, t: TransducerParams, mode: Mode = "ideal"):
    """Apparent mass and damping seen at the nut.

    ``ideal`` assumes a lossless screw; ``backdriven`` uses h = 1/eta, the
    value taken whenever the harvester is generating.
    """
    if mode == "ideal":
        scale = 1.0 / t.lead**2
    elif mode == "backdriven":
        scale = 1.0 / (t.eta * t.lead**2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return mech.m + t.J * scale, mech.c + t.B * scale


@numba.njit(cache=True)
def _h(u, eta):
    # efficiency factor; the eta branch is used at exactly zero power
    return eta if u >= 0.0 else 1.0 / eta


@numba.njit(cache=True)
def phi_branch(x, xd, fe, a, m, k, fc, eta):
    """+1 for the forward-sliding set, -1 for backward, 0 when stuck."""
    if xd > STICK_VELOCITY:
        return 1
    if xd < -STICK_VELOCITY:
        return -1
    if fc < -m * a - k * x + _h(fe, eta) * fe:
        return 1
    if fc < m * a + k * x - _h(-fe, eta) * fe:
        return -1
    return 0


@numba.njit(cache=True)
def phi_scalar(x, xd, fe, a, m, c, k, J, B, fc, lead, eta):
    """Transducer force on the mass for one state (see :func:`transducer_force`)."""
    branch = phi_branch(x, xd, fe, a, m, k, fc, eta)
    if branch == 0:
        return m * a + k * x
    if -STICK_VELOCITY <= xd <= STICK_VELOCITY:
        xd = 0.0
    kappa = J / (lead * lead * m)
    beta = (
        J / (lead * lead) * a
        + J * k / (m * lead * lead) * x
        + (J * c / (m * lead * lead) - B / (lead * lead)) * xd
        + fe
    )
    if branch == 1:
        u = beta + kappa * fc
        hu = _h(u, eta)
        return hu * u / (1.0 + kappa * hu) - fc
    u = beta - kappa * fc
    hu = _h(-u, eta)
    return hu * u / (1.0 + kappa * hu) + fc


@numba.vectorize(cache=True)
def _phi_vec(x, xd, fe, a, m, c, k, J, B, fc, lead, eta):
    return phi_scalar(x, xd, fe, a, m, c, k, J, B, fc, lead, eta)


@numba.vectorize(cache=True)
def _branch_vec(x, xd, fe, a, m, k, fc, eta):
    return phi_branch(x, xd, fe, a, m, k, fc, eta)


def transducer_force(x, xdot, f_e, a, mech: MechParams, t: TransducerParams):
    """Total transducer force f = Phi(x, xdot, f_e, a).

    Resolves the implicit efficiency/friction model into a single-valued
    function: forward sliding, backward sliding, or sticking (f = m a + k x,
    which holds the mass at zero velocity). Broadcasts over array inputs.
    """
    out = _phi_vec(
        np.asarray(x, float), np.asarray(xdot, float), np.asarray(f_e, float),
        np.asarray(a, float), mech.m, mech.c, mech.k, t.J, t.B, t.f_c, t.lead, t.eta,
    )
    return float(out) if np.ndim(out) == 0 else out


def force_branch(x, xdot, f_e, a, mech: MechParams, t: TransducerParams):
    out = _branch_vec(
        np.asarray(x, float), np.asarray(xdot, float), np.asarray(f_e, float),
        np.asarray(a, float), mech.m, mech.k, t.f_c, t.eta,
    )
    return int(out) if np.ndim(out) == 0 else out


def sticking_inequalities(x, f_e, a, mech: MechParams, t: TransducerParams):
    """Evaluate the two breakaway inequalities at zero velocity.

    Returns ``(forward, backward)`` boolean arrays; ``forward`` means friction
    saturates at its lower bound and the mass accelerates positively.
    """
    x, f_e, a = (np.asarray(v, float) for v in (x, f_e, a))
    h_pos = np.where(f_e >= 0, t.eta, 1.0 / t.eta)
    h_neg = np.where(-f_e >= 0, t.eta, 1.0 / t.eta)
    load = mech.m * a + mech.k * x
    return t.f_c < -load + h_pos * f_e, t.f_c < load - h_neg * f_e


# ---------------------------------------------------------------------------
# electrical


def park_matrix(theta_re: float) -> np.ndarray:
    """Amplitude-invariant combined Clarke/Park matrix (abc -> dq0)."""
    angles = theta_re + np.array([0.0, -_TWO_PI_3, _TWO_PI_3])
    return (2.0 / 3.0) * np.vstack([np.cos(angles), -np.sin(angles), np.full(3, 0.5)])


def inverse_park_matrix(theta_re: float) -> np.ndarray:
    angles = theta_re + np.array([0.0, -_TWO_PI_3, _TWO_PI_3])
    return np.column_stack([np.cos(angles), -np.sin(angles), np.ones(3)])


def park(theta_re: float, v_abc) -> np.ndarray:
    return park_matrix(theta_re) @ np.asarray(v_abc, float)


def inverse_park(theta_re: float, v_dq0) -> np.ndarray:
    return inverse_park_matrix(theta_re) @ np.asarray(v_dq0, float)


def electromech_force(i_q, t: TransducerParams):
    return t.force_constant * np.asarray(i_q, float) if np.ndim(i_q) else t.force_constant * i_q


def dq_current_derivatives(i_d, i_q, v_d, v_q, xdot, t: TransducerParams):
    """Right-hand sides of the rotor-frame current equations."""
    w = t.electrical_speed_ratio * xdot
    did = (v_d - t.R * i_d + w * t.L * i_q) / t.L
    diq = (v_q - t.R * i_q - w * (t.L * i_d + t.lambda_pm)) / t.L
    return did, diq


def steady_state_voltages(i_d, i_q, xdot, t: TransducerParams):
    """dq voltages that hold (i_d, i_q) constant at velocity ``xdot``."""
    w = t.electrical_speed_ratio * xdot
    v_d = t.R * i_d - w * t.L * i_q
    v_q = t.R * i_q + w * (t.L * i_d + t.lambda_pm)
    return v_d, v_q


def generated_power(i_d, i_q, xdot, t: TransducerParams):
    """P_gen = -(3/2)(v_d i_d + v_q i_q) with quasi-static voltages."""
    v_d, v_q = steady_state_voltages(i_d, i_q, xdot, t)
    return -1.5 * (v_d * i_d + v_q * i_q)


# ---------------------------------------------------------------------------
# bus-voltage feasibility


@numba.njit(cache=True)
def disc_coefficients(xdot, R, L, lambda_pm, n_p, lead, v_s, delta):
    """(offset_q, offset_d, radius_sq) of the feasible current disc at ``xdot``."""
    two_rl = 2.0 * R * lead
    npl = n_p * L * xdot
    den = two_rl * two_rl + npl * npl
    offset_q = 2.0 * n_p * lambda_pm * R * lead * xdot / den
    offset_d = (n_p * xdot) ** 2 * lambda_pm * L / den
    radius_sq = (delta * lead * v_s) ** 2 / den
    return offset_q, offset_d, radius_sq


@dataclass(frozen=True)
class FeasibilityRegion:
    """Feasible (i_d, i_q) disc at one velocity.

    The disc is centred at ``(-offset_d, -offset_q)`` with squared radius
    ``radius_sq``. All fields are infinite/zero when the bus is infinite.
    """

    xdot: float
    offset_q: float
    offset_d: float
    radius_sq: float

    @classmethod
    def at(cls, xdot: float, t: TransducerParams, bus: BusParams) -> "FeasibilityRegion":
        if bus.infinite:
            return cls(xdot, 0.0, 0.0, math.inf)
        oq, od, r2 = disc_coefficients(
            float(xdot), t.R, t.L, t.lambda_pm, float(t.n_p), t.lead, bus.v_s, bus.delta
        )
        return cls(float(xdot), oq, od, r2)

    @property
    def radius(self) -> float:
        return math.sqrt(self.radius_sq)

    def margin(self, i_d, i_q):
        if math.isinf(self.radius_sq):
            return np.inf + 0.0 * np.asarray(i_d, float) * np.asarray(i_q, float)
        return self.radius_sq - (i_q + self.offset_q) ** 2 - (i_d + self.offset_d) ** 2


def iq_bounds(xdot: float, t: TransducerParams, bus: BusParams) -> tuple[float, float]:
    """Range of q-axis currents for which some d-axis current is feasible."""
    region = FeasibilityRegion.at(xdot, t, bus)
    if math.isinf(region.radius_sq):
        return -math.inf, math.inf
    if not region.radius_sq > 0 or not math.isfinite(region.radius_sq):
        raise InfeasibleSpeedError(f"feasibility disc is empty at xdot={xdot!r}")
    r = math.sqrt(region.radius_sq)
    return -r - region.offset_q, r - region.offset_q


def dq_feasible(i_d: float, i_q: float, xdot: float, t: TransducerParams, bus: BusParams):
    """Return ``(ok, margin)`` with margin = RHS - LHS of the disc inequality [A^2]."""
    margin = FeasibilityRegion.at(xdot, t, bus).margin(i_d, i_q)
    return bool(margin >= 0), float(margin)


# ---------------------------------------------------------------------------
# augmented linear(ized) plant


@dataclass(frozen=True)
class StateSpace:
    """Augmented plant on ``xi = [x, xdot, d, a]`` with input i_q.

    ``C`` maps the state to the back-EMF coefficient used in the power
    objective; ``F`` is the friction input multiplying sgn(xdot); ``R`` is
    the winding resistance weighting the current in that objective.
    """

    A: np.ndarray
    B: np.ndarray
    B_w: np.ndarray
    C: np.ndarray
    C_v: np.ndarray
    F: np.ndarray
    R: float
    m_tilde: float
    c_tilde: float
    mode: str = "ideal"
    #: N_p L / (2 lead), the speed coefficient of the inductive voltage drop
    inductive_coeff: float = 0.0

    @property
    def emf_coeff(self) -> float:
        return float(self.C[0, 1])

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def with_A(self, A_new: np.ndarray) -> "StateSpace":
        return StateSpace(
            np.array(A_new, float), self.B, self.B_w, self.C, self.C_v, self.F,
            self.R, self.m_tilde, self.c_tilde, self.mode, self.inductive_coeff,
        )


def disturbance_filter(dist: DisturbanceParams) -> tuple[np.ndarray, np.ndarray]:
    """2-state bandpass shaping filter (state [d, a], unit white-noise input)."""
    A = np.array([[0.0, 1.0], [-dist.omega_a**2, -2.0 * dist.zeta_a * dist.omega_a]])
    B = np.array([[0.0], [dist.input_gain]])
    return A, B


def assemble_plant(
    mech: MechParams,
    t: TransducerParams,
    dist: DisturbanceParams,
    mode: Mode = "ideal",
    A_eq_override: np.ndarray | None = None,
) -> StateSpace:
    m_t, c_t = effective_inertia(mech, t, mode)
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 0] = -mech.k / m_t
    A[1, 1] = -c_t / m_t
    A[1, 3] = -mech.m / m_t
    A[2:, 2:] = disturbance_filter(dist)[0]
    B = np.zeros((4, 1))
    B[1, 0] = t.force_constant / m_t
    B_w = np.zeros((4, 1))
    B_w[3, 0] = dist.input_gain
    C = np.array([[0.0, t.emf_constant, 0.0, 0.0]])
    C_v = np.array([[0.0, 1.0, 0.0, 0.0]])
    F = np.zeros((4, 1))
    F[1, 0] = -t.f_c / m_t
    if A_eq_override is not None:
        A = np.array(A_eq_override, float)
        if A.shape != (4, 4):
            raise ValueError("A_eq_override must be 4x4")
    return StateSpace(
        A, B, B_w, C, C_v, F, t.R, m_t, c_t, mode, t.electrical_speed_ratio * t.L
    )


def plant_from_params(params: PlantParams, mode: Mode = "backdriven") -> StateSpace:
    return assemble_plant(params.mech, params.transducer, params.disturbance, mode)
