"""Sample-by-sample vector control law.

Each step propagates the q-axis controller, clips its command to the
bus-feasible range at the filtered velocity, adds just enough negative d-axis
current to land inside the voltage disc, and maps (i_d, i_q, 0) to phase
currents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.linalg as sla

from .model import InfeasibleSpeedError, disc_coefficients, inverse_park
from .params import BusParams, TransducerParams
from .synthesis import ControllerQ

#: cutoff of the velocity low-pass feeding saturation and field weakening [Hz]
DEFAULT_F_LP = 100.0
#: radicand values above -RADICAND_DUST (relative to radius^2) are rounding noise
RADICAND_DUST = 1e-12


def zoh_discretize(A: np.ndarray, B: np.ndarray, dt: float):
    """Exact zero-order-hold discretization via one augmented matrix exponential."""
    n, m = A.shape[0], B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = sla.expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def lowpass_coefficient(f_lp: float, dt: float) -> float:
    return math.exp(-2.0 * math.pi * f_lp * dt)


@numba.njit(cache=True)
def saturate_scalar(i_q_star, xhat, R, L, lam, n_p, lead, v_s, delta):
    """Clip to [I_q_min, I_q_max] at ``xhat``; returns (i_q, saturated)."""
    if math.isinf(v_s):
        return i_q_star, False
    oq, od, r2 = disc_coefficients(xhat, R, L, lam, n_p, lead, v_s, delta)
    r = math.sqrt(r2)
    lo = -r - oq
    hi = r - oq
    if i_q_star > hi:
        return hi, True
    if i_q_star < lo:
        return lo, True
    return i_q_star, False


@numba.njit(cache=True)
def field_weaken_scalar(xhat, i_q, R, L, lam, n_p, lead, v_s, delta):
    """Least-magnitude non-positive i_d inside the disc.

    Returns (i_d, status) where status 0 = ok, 1 = radicand negative beyond
    rounding (i_q outside the feasible q-range).
    """
    if math.isinf(v_s):
        return 0.0, 0
    oq, od, r2 = disc_coefficients(xhat, R, L, lam, n_p, lead, v_s, delta)
    rad = r2 - (i_q + oq) ** 2
    status = 0
    if rad < 0.0:
        if rad < -RADICAND_DUST * max(1.0, r2):
            status = 1
        rad = 0.0
    sigma = math.sqrt(rad)
    return min(0.0, sigma - od), status


@dataclass
class RuntimeState:
    x_K: np.ndarray = field(default_factory=lambda: np.zeros(4))
    filt: float = 0.0
    i_q_star: float = 0.0
    i_q: float = 0.0
    i_d: float = 0.0


@dataclass(frozen=True)
class ControlOutput:
    i_q_star: float
    i_q: float
    i_d: float
    i_abc: np.ndarray
    saturated: bool
    weakening: bool
    xdot_hat: float


class VectorControlLaw:
    """Runtime implementation of the full law (K_q, saturation, K_d, dq -> abc).

    Discretizations are cached per step size.
    """

    def __init__(
        self,
        controller: ControllerQ,
        transducer: TransducerParams,
        bus: BusParams,
        f_lp: float = DEFAULT_F_LP,
        T_vy: np.ndarray | None = None,
    ):
        self.controller = controller
        self.t = transducer
        self.bus = bus
        self.f_lp = f_lp
        self.T_vy = np.ones((1, controller.B_K.shape[1])) if T_vy is None else np.atleast_2d(T_vy)
        self._zoh: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def new_state(self) -> RuntimeState:
        return RuntimeState(x_K=np.zeros(self.controller.order))

    def discretized(self, dt: float):
        if dt not in self._zoh:
            self._zoh[dt] = zoh_discretize(self.controller.A_K, self.controller.B_K, dt)
        return self._zoh[dt]

    def _disc_args(self):
        t = self.t
        return t.R, t.L, t.lambda_pm, float(t.n_p), t.lead, self.bus.v_s, self.bus.delta

    def step_kq(self, state: RuntimeState, y, dt: float) -> float:
        """Emit C_K x_K for the current sample, then advance x_K over ``dt`` with y held."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        Ad, Bd = self.discretized(dt)
        i_q_star = (self.controller.C_K @ state.x_K).item()
        state.x_K = Ad @ state.x_K + Bd @ np.atleast_1d(np.asarray(y, float))
        state.i_q_star = i_q_star
        return i_q_star

    def saturate_iq(self, i_q_star: float, xdot_hat: float) -> tuple[float, bool]:
        i_q, sat = saturate_scalar(float(i_q_star), float(xdot_hat), *self._disc_args())
        return float(i_q), bool(sat)

    def field_weaken(self, xdot_hat: float, i_q: float) -> float:
        i_d, status = field_weaken_scalar(float(xdot_hat), float(i_q), *self._disc_args())
        if status:
            raise InfeasibleSpeedError(
                f"i_q={i_q!r} lies outside the feasible q-range at xdot_hat={xdot_hat!r}"
            )
        return float(i_d)

    def lowpass_step(self, state: RuntimeState, xdot_tilde: float, dt: float) -> float:
        """First-order low-pass with unit DC gain (exact for a held input)."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        alpha = lowpass_coefficient(self.f_lp, dt)
        state.filt = alpha * state.filt + (1.0 - alpha) * float(xdot_tilde)
        return state.filt

    def full_step(self, state: RuntimeState, y, theta_re: float, dt: float) -> ControlOutput:
        y = np.atleast_1d(np.asarray(y, float))
        xdot_hat = self.lowpass_step(state, (self.T_vy @ y).item(), dt)
        i_q_star = self.step_kq(state, y, dt)
        i_q, sat = self.saturate_iq(i_q_star, xdot_hat)
        i_d = self.field_weaken(xdot_hat, i_q)
        state.i_q, state.i_d = i_q, i_d
        i_abc = inverse_park(theta_re, [i_d, i_q, 0.0])
        return ControlOutput(i_q_star, i_q, i_d, i_abc, sat, i_d < 0.0, xdot_hat)
