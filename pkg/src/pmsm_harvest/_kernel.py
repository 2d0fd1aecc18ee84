"""Compiled fixed-step closed-loop integrator used by :mod:`simulation`."""

from __future__ import annotations

import math

import numba
import numpy as np

from .model import STICK_VELOCITY, disc_coefficients, phi_branch, phi_scalar
from .runtime import field_weaken_scalar, saturate_scalar

# indices into the ``stats`` output vector
ST_P_INTEGRAL = 0
ST_ID2_SUM = 1
ST_SAT = 2
ST_WEAKEN = 3
ST_MIN_MARGIN_HAT = 4
ST_INFEASIBLE_TRUE = 5
ST_PEAKS = 6
ST_PEAKS_OVER = 7
ST_P_NEG = 8
ST_MOVING = 9
ST_COUNTED = 10
ST_XD2_SUM = 11
ST_IQ2_SUM = 12
ST_P_SUM = 13
ST_STATUS = 14
ST_STUCK = 15
N_STATS = 16

STATUS_OK = 0
STATUS_BLOWUP = 1
STATUS_RADICAND = 2


@numba.njit(cache=True)
def _accel(x, xd, a, fe, m, c, k, J, B, fc, lead, eta):
    f = phi_scalar(x, xd, fe, a, m, c, k, J, B, fc, lead, eta)
    return (-k * x - c * xd - m * a + f) / m


@numba.njit(cache=True)
def _deriv(s, fe, wb, mp, out):
    # mp = [m, c, k, J, B, fc, lead, eta, omega_a, zeta_a]
    out[0] = s[1]
    out[1] = _accel(s[0], s[1], s[3], fe, mp[0], mp[1], mp[2], mp[3], mp[4], mp[5], mp[6], mp[7])
    out[2] = s[3]
    out[3] = -mp[8] * mp[8] * s[2] - 2.0 * mp[9] * mp[8] * s[3] + wb


@numba.njit(cache=True)
def run_kernel(
    xi0, mp, ep, bw_gain, Ad, Bd, C_K, alpha, w, n_meas, dt, i_cont,
    saturate, warmup_steps, decim, rec, stats,
):
    """Integrate the closed loop for ``len(w)`` steps.

    ep = [R, L, lambda_pm, n_p, lead, v_s, delta]. ``rec`` has one row per
    recorded sample with columns t, x, xdot, a, iq_star, iq, id, vd, vq, pgen,
    pbar. Returns the number of steps completed.
    """
    n_steps = w.shape[0]
    nk = Ad.shape[0]
    s = xi0.copy()
    xk = np.zeros(nk)
    xk_new = np.zeros(nk)
    k1 = np.zeros(4)
    k2 = np.zeros(4)
    k3 = np.zeros(4)
    k4 = np.zeros(4)
    tmp = np.zeros(4)
    R, L, lam, n_p, lead, v_s, delta = ep[0], ep[1], ep[2], ep[3], ep[4], ep[5], ep[6]
    emf = n_p * lam / (2.0 * lead)
    fconst = 3.0 * n_p * lam / (4.0 * lead)
    wL = n_p / (2.0 * lead) * L
    J, Bv, lead2 = mp[3], mp[4], mp[6] * mp[6]
    finite_bus = not math.isinf(v_s)
    xhat = 0.0
    p_int = 0.0
    p_prev = 0.0
    aq1 = 0.0
    aq2 = 0.0
    stats[ST_MIN_MARGIN_HAT] = np.inf
    row = 0
    for i in range(n_steps):
        y = s[1] + n_meas[i]
        xhat = alpha * xhat + (1.0 - alpha) * y
        iq_star = 0.0
        for j in range(nk):
            iq_star += C_K[j] * xk[j]
        if saturate:
            iq, sat = saturate_scalar(iq_star, xhat, R, L, lam, n_p, lead, v_s, delta)
        else:
            iq, sat = iq_star, False
        idd, status = field_weaken_scalar(xhat, iq, R, L, lam, n_p, lead, v_s, delta)
        if saturate and status != 0:
            stats[ST_STATUS] = STATUS_RADICAND
            return i
        xd = s[1]
        vd = R * idd - wL * xd * iq
        vq = R * iq + xd * (wL * idd + emf)
        pgen = -1.5 * (vd * idd + vq * iq)
        if i == 0:
            p_int = 0.0
            pbar = pgen
        else:
            p_int += 0.5 * (p_prev + pgen) * dt
            pbar = p_int / (i * dt)
        p_prev = pgen
        if i % decim == 0 and row < rec.shape[0]:
            rec[row, 0] = i * dt
            rec[row, 1] = s[0]
            rec[row, 2] = xd
            rec[row, 3] = s[3]
            rec[row, 4] = iq_star
            rec[row, 5] = iq
            rec[row, 6] = idd
            rec[row, 7] = vd
            rec[row, 8] = vq
            rec[row, 9] = pgen
            rec[row, 10] = pbar
            row += 1
        fe = fconst * iq
        if i >= warmup_steps:
            stats[ST_COUNTED] += 1.0
            stats[ST_ID2_SUM] += idd * idd
            stats[ST_IQ2_SUM] += iq * iq
            stats[ST_XD2_SUM] += xd * xd
            stats[ST_P_SUM] += pgen
            if sat:
                stats[ST_SAT] += 1.0
            if idd < 0.0:
                stats[ST_WEAKEN] += 1.0
            if finite_bus:
                oq, od, r2 = disc_coefficients(xhat, R, L, lam, n_p, lead, v_s, delta)
                mh = r2 - (iq + oq) ** 2 - (idd + od) ** 2
                if mh < stats[ST_MIN_MARGIN_HAT]:
                    stats[ST_MIN_MARGIN_HAT] = mh
                oq, od, r2 = disc_coefficients(xd, R, L, lam, n_p, lead, v_s, delta)
                if r2 - (iq + oq) ** 2 - (idd + od) ** 2 < 0.0:
                    stats[ST_INFEASIBLE_TRUE] += 1.0
            aq = abs(iq)
            if aq1 > aq2 and aq1 >= aq and i > warmup_steps + 1:
                stats[ST_PEAKS] += 1.0
                if aq1 > i_cont:
                    stats[ST_PEAKS_OVER] += 1.0
            aq2 = aq1
            aq1 = aq
            if xd > STICK_VELOCITY or xd < -STICK_VELOCITY:
                acc = _accel(s[0], xd, s[3], fe, mp[0], mp[1], mp[2], J, Bv, mp[5], mp[6], mp[7])
                pnut = (fe - J / lead2 * acc - Bv / lead2 * xd) * xd
                stats[ST_MOVING] += 1.0
                if pnut < 0.0:
                    stats[ST_P_NEG] += 1.0
            else:
                stats[ST_STUCK] += 1.0
        # RK4 with the current and noise sample held across the step
        wb = bw_gain * w[i]
        _deriv(s, fe, wb, mp, k1)
        for j in range(4):
            tmp[j] = s[j] + 0.5 * dt * k1[j]
        _deriv(tmp, fe, wb, mp, k2)
        for j in range(4):
            tmp[j] = s[j] + 0.5 * dt * k2[j]
        _deriv(tmp, fe, wb, mp, k3)
        for j in range(4):
            tmp[j] = s[j] + dt * k3[j]
        _deriv(tmp, fe, wb, mp, k4)
        xd_old = s[1]
        for j in range(4):
            s[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        # pin the velocity when a zero crossing lands in the sticking region
        if xd_old * s[1] < 0.0:
            if phi_branch(s[0], 0.0, fe, s[3], mp[0], mp[2], mp[5], mp[7]) == 0:
                s[1] = 0.0
        for j in range(nk):
            acc_k = Bd[j] * y
            for l in range(nk):
                acc_k += Ad[j, l] * xk[l]
            xk_new[j] = acc_k
        for j in range(nk):
            xk[j] = xk_new[j]
        for j in range(4):
            if not abs(s[j]) < 1e9:
                stats[ST_STATUS] = STATUS_BLOWUP
                return i + 1
    stats[ST_P_INTEGRAL] = p_int
    return n_steps
