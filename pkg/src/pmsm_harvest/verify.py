"""Self-checks run by ``pmsm-harvest verify``.

Each check reports its measured value next to the threshold it was held to,
so a failure is diagnostic content rather than an exception.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control_math import care_residual, closed_loop_moments, solve_care
from .model import inverse_park, park, plant_from_params
from .params import PlantParams
from .simulation import SimConfig, batch_mean_error, simulate
from .synthesis import (
    ControllerQ,
    SynthesisConfig,
    SynthesisError,
    certified_plant,
    iterate_design,
)

GUARANTEE_SLACK = 1e-6


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "vacuous"
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        return f"{self.status.upper():7s} {self.name}: {self.value:.6g} (limit {self.threshold:.3g}) {self.detail}".rstrip()


def _check(name, ok, value, threshold, detail=""):
    return Check(name, "pass" if ok else "fail", float(value), float(threshold), detail)


def check_transforms(n: int = 1000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        theta = rng.uniform(-50, 50)
        v = rng.normal(size=3)
        worst = max(worst, float(np.max(np.abs(park(theta, inverse_park(theta, v)) - v))))
    return _check("park round trip", worst <= 1e-12, worst, 1e-12)


def check_riccati(params: PlantParams) -> Check:
    plant = plant_from_params(params, "ideal")
    sol = solve_care(plant.A, plant.B, plant.C, plant.R)
    scale = max(np.linalg.norm(plant.A) * np.linalg.norm(sol.S), np.linalg.norm(plant.C) ** 2 / plant.R, 1e-300)
    rel = float(np.linalg.norm(care_residual(sol.S, plant.A, plant.B, plant.C, plant.R)) / scale)
    return _check("riccati residual (relative)", rel <= 1e-10, rel, 1e-10)


def check_guarantees(params: PlantParams, K: ControllerQ, gamma: float, xdot_m: float, plant=None) -> list[Check]:
    """Independent Lyapunov evaluation of the design guarantees."""
    plant = plant if plant is not None else certified_plant(params, K)
    mom = closed_loop_moments(plant, K, params.measurement)
    i_cont = params.transducer.i_cont
    lim_iq = i_cont**2 / 4
    out = [
        _check("E{i_q^2} bound", mom.eiq2 <= lim_iq * (1 + GUARANTEE_SLACK), mom.eiq2, lim_iq),
        _check(
            "linear mean power >= gamma",
            mom.p_gen_lin >= gamma - GUARANTEE_SLACK * max(abs(gamma), 1.0),
            mom.p_gen_lin,
            gamma,
        ),
    ]
    if xdot_m > 0:
        lim = xdot_m**2
        out.append(_check("E{xdot^2} bound", mom.ex2 <= lim * (1 + GUARANTEE_SLACK), mom.ex2, lim))
    return out


def check_feasibility(params: PlantParams, K: ControllerQ, duration: float, seed: int) -> Check:
    if math.isinf(params.bus.v_s):
        return Check("dq feasibility at filtered velocity", "vacuous", math.inf, -1e-12, "infinite bus")
    res = simulate(params, K, SimConfig(duration=duration, seed=seed))
    return _check("dq feasibility at filtered velocity", res.min_margin_hat >= -1e-12, res.min_margin_hat, -1e-12, "min margin A^2")


def check_linear_oracle(params: PlantParams, xdot_m: float, duration: float, seed: int) -> Check:
    lin = params.with_(eta=1.0, f_c=0.0, v_s=math.inf)
    res = iterate_design(lin, SynthesisConfig.from_params(lin, xdot_m=xdot_m))
    mom = closed_loop_moments(plant_from_params(lin, "ideal"), res.controller, lin.measurement, False)
    sim = simulate(lin, res.controller, SimConfig(duration=duration, seed=seed, saturate=False))
    keep = sim.series["t"] >= SimConfig.warmup
    mean, se = batch_mean_error(sim.series["pgen"][keep])
    z = abs(mean - mom.p_gen_lin) / se
    return _check("linear-oracle power (z-score)", z <= 3.0, z, 3.0, f"sim {mean:.4g} W vs analytic {mom.p_gen_lin:.4g} W")


def run_checks(
    params: PlantParams,
    controller: ControllerQ | None = None,
    gamma: float | None = None,
    xdot_m: float = 0.0286,
    duration: float = 600.0,
    seed: int = 0,
) -> list[Check]:
    checks = [check_transforms(), check_riccati(params)]
    plant = None
    try:
        if controller is None:
            res = iterate_design(params, SynthesisConfig.from_params(params, xdot_m=xdot_m))
            controller, gamma, plant = res.controller, res.gamma, res.plant
        if gamma is None:
            gamma = -math.inf
        checks += check_guarantees(params, controller, gamma, xdot_m, plant)
        checks.append(check_feasibility(params, controller, duration, seed))
    except (SynthesisError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        checks.append(Check("design guarantees", "fail", math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    try:
        checks.append(check_linear_oracle(params, xdot_m, duration, seed))
    except (SynthesisError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        checks.append(Check("linear-oracle power", "fail", math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    return checks
