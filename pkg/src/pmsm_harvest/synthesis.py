"""Convex synthesis of the q-axis current controller.

The output-feedback design is posed as a semidefinite program over the
linearizing change of variables (X, Y, A~, B~, C~) with a Riccati-based power
bound, optional mean-square velocity and bus-voltage constraints, and is
wrapped in a stochastic-linearization loop that folds Coulomb friction into an
equivalent viscous term.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import cvxpy as cp
import numpy as np

from .control_math import (
    closed_loop_moments,
    is_hurwitz,
    lyapunov_residual,
    solve_care,
    solve_lyapunov,
)
from .model import StateSpace, assemble_plant
from .params import MeasurementModel, PlantParams

log = logging.getLogger(__name__)

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class SynthesisError(RuntimeError):
    pass


class InfeasibleProgramError(SynthesisError):
    def __init__(self, message: str, active_blocks: tuple[str, ...] = ()):
        super().__init__(message)
        self.active_blocks = active_blocks


class SolverFailureError(SynthesisError):
    pass


class DegenerateFactorizationError(SynthesisError, np.linalg.LinAlgError):
    pass


class FixedPointError(SynthesisError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs for one controller design.

    ``xdot_m = 0`` drops the velocity and bus-voltage LMIs entirely, leaving
    the pure power-maximization program.
    """

    xdot_m: float = 0.0286
    i_cont: float = 2.0
    delta: float = 0.95
    v_s: float = 20.0
    eps_lmi: float = 1e-7
    max_iters: int = 50
    tol_gamma: float = 1e-5
    solver: str = "CVXOPT"

    def __post_init__(self):
        if not self.xdot_m >= 0:
            raise ValueError("xdot_m must be >= 0")
        if not (self.eps_lmi > 0 and self.tol_gamma > 0 and self.i_cont > 0):
            raise ValueError("eps_lmi, tol_gamma and i_cont must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    @classmethod
    def from_params(cls, params: PlantParams, **overrides) -> "SynthesisConfig":
        base = dict(
            i_cont=params.transducer.i_cont, delta=params.bus.delta, v_s=params.bus.v_s
        )
        base.update(overrides)
        return cls(**base)

    @property
    def velocity_constrained(self) -> bool:
        return self.xdot_m > 0

    @property
    def bus_constrained(self) -> bool:
        return self.xdot_m > 0 and math.isfinite(self.v_s)


@dataclass(frozen=True)
class ControllerQ:
    A_K: np.ndarray
    B_K: np.ndarray
    C_K: np.ndarray

    def __post_init__(self):
        for name in ("A_K", "B_K", "C_K"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        n = self.A_K.shape[0]
        if self.A_K.shape != (n, n) or self.B_K.shape[0] != n or self.C_K.shape != (1, n):
            raise ValueError("inconsistent controller dimensions")

    @property
    def order(self) -> int:
        return self.A_K.shape[0]

    def markov(self, count: int = 8) -> np.ndarray:
        """Markov parameters C_K A_K^j B_K, j = 0..count-1."""
        out, v = [], self.B_K
        for _ in range(count):
            out.append((self.C_K @ v).ravel())
            v = self.A_K @ v
        return np.array(out)

    @classmethod
    def zero(cls, n: int = 4, n_outputs: int = 1) -> "ControllerQ":
        return cls(-np.eye(n), np.zeros((n, n_outputs)), np.zeros((1, n)))

    def to_dict(self) -> dict[str, Any]:
        return {"A_K": self.A_K.tolist(), "B_K": self.B_K.tolist(), "C_K": self.C_K.tolist()}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ControllerQ":
        return cls(np.array(doc["A_K"]), np.array(doc["B_K"]), np.array(doc["C_K"]))


@dataclass(frozen=True)
class LmiVariables:
    """Optimizer variables, in the (diagonally scaled) coordinates they were solved in.

    ``A``, ``B`` and ``C_y`` are the plant data in those same coordinates;
    they are needed to invert the change of variables. ``state_scale`` and
    ``output_scale`` map back: xi = diag(state_scale) xi_s, y = output_scale y_s.
    """

    X: np.ndarray
    Y: np.ndarray
    A_t: np.ndarray
    B_t: np.ndarray
    C_t: np.ndarray
    beta: float
    gamma: float
    A: np.ndarray
    B: np.ndarray
    C_y: np.ndarray
    state_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    output_scale: float = 1.0
    margins: dict[str, float] = field(default_factory=dict)


@dataclass
class SynthesisResult:
    controller: ControllerQ
    vars: LmiVariables
    sigma: np.ndarray
    gamma_trace: list[float]
    iterations: int
    converged: bool
    plant: StateSpace
    cfg: SynthesisConfig
    meas: MeasurementModel = field(default_factory=MeasurementModel)

    @property
    def gamma(self) -> float:
        return self.vars.gamma


# ---------------------------------------------------------------------------
# SDP


def _state_scale(plant: StateSpace) -> np.ndarray:
    """Per-state RMS of the uncontrolled plant, used to balance the SDP."""
    W = plant.B_w @ plant.B_w.T
    if not np.any(W) or not is_hurwitz(plant.A):
        return np.ones(plant.n_states)
    s = np.sqrt(np.clip(np.diag(solve_lyapunov(plant.A, W)), 0, None))
    s[s <= 0] = 1.0
    return s


def _sym(M):
    return 0.5 * (M + M.T)


def solve_op(
    plant: StateSpace,
    meas: MeasurementModel,
    cfg: SynthesisConfig,
    riccati=None,
    *,
    verbose: bool = False,
) -> LmiVariables:
    """Maximize the guaranteed mean power gamma over the LMI variables.

    Builds the power/current LMIs, and, when ``cfg.xdot_m > 0``, the velocity
    LMI and (finite bus only) the conservative q-axis voltage LMI. Strict
    inequalities are imposed with a margin of ``eps_lmi`` times the largest
    constant entry of each block.
    """
    if not is_hurwitz(plant.A):
        raise SynthesisError("synthesis plant must be Hurwitz")
    if riccati is None:
        riccati = solve_care(plant.A, plant.B, plant.C, plant.R)
    n = plant.n_states
    ny = meas.n_outputs
    s = _state_scale(plant)
    T, Ti = np.diag(s), np.diag(1.0 / s)
    sy = float(np.sqrt(np.max(np.diag(meas.C_y @ np.diag(s**2) @ meas.C_y.T))))
    sy = sy if sy > 0 else 1.0

    A = Ti @ plant.A @ T
    B = Ti @ plant.B
    Bw = Ti @ plant.B_w
    Cy = meas.C_y @ T / sy
    Cv = plant.C_v @ T
    S = T @ riccati.S @ T
    H = riccati.H @ T
    phi_n_inv = np.linalg.inv(meas.phi_n / sy**2)
    R = plant.R
    I = np.eye(n)

    X = cp.Variable((n, n), symmetric=True, name="X")
    Y = cp.Variable((n, n), symmetric=True, name="Y")
    At = cp.Variable((n, n), name="A_t")
    Bt = cp.Variable((n, ny), name="B_t")
    Ct = cp.Variable((1, n), name="C_t")
    beta = cp.Variable(name="beta")
    gamma = cp.Variable(name="gamma")

    def margin(*consts):
        return cfg.eps_lmi * max(1.0, *(float(np.max(np.abs(c))) for c in consts))

    blocks: dict[str, Any] = {}
    cons = []

    d1 = A @ X + B @ Ct
    d2 = Y @ A + Bt @ Cy
    lmi1 = cp.bmat([
        [d1 + d1.T, A + At.T, Bw, np.zeros((n, ny))],
        [(A + At.T).T, d2 + d2.T, Y @ Bw, Bt],
        [Bw.T, (Y @ Bw).T, -np.eye(1), np.zeros((1, ny))],
        [np.zeros((ny, n)), Bt.T, np.zeros((ny, 1)), -phi_n_inv],
    ])
    e1 = margin(A, Bw, phi_n_inv)
    blocks["lmi1"] = -lmi1
    cons.append(_sym(-lmi1) >> e1 * np.eye(2 * n + 1 + ny))

    # current-variance LMI, first row/column normalized by i_cont/2
    ic = cfg.i_cont / 2.0
    lmi2 = cp.bmat([
        [np.ones((1, 1)), Ct / ic, np.zeros((1, n))],
        [Ct.T / ic, X, I],
        [np.zeros((n, 1)), I, Y],
    ])
    blocks["lmi2"] = lmi2
    cons.append(_sym(lmi2) >> margin(I) * np.eye(2 * n + 1))

    lmi3 = cp.bmat([
        [cp.reshape(beta, (1, 1), order="C"), Ct - H @ X, -H],
        [(Ct - H @ X).T, X, I],
        [-H.T, I, Y],
    ])
    blocks["lmi3"] = lmi3
    cons.append(_sym(lmi3) >> margin(I, H) * np.eye(2 * n + 1))

    p_opt = float(-1.5 * 0.5 * (Bw.T @ S @ Bw).item())
    lmi4 = p_opt - 1.5 * beta * R - gamma
    blocks["lmi4"] = lmi4
    cons.append(lmi4 >= margin(p_opt))

    if cfg.velocity_constrained:
        xm = cfg.xdot_m
        lmi5 = cp.bmat([
            [np.ones((1, 1)), Cv @ X / xm, Cv / xm],
            [(Cv @ X).T / xm, X, I],
            [Cv.T / xm, I, Y],
        ])
        blocks["lmi5"] = lmi5
        cons.append(_sym(lmi5) >> margin(I, Cv / xm) * np.eye(2 * n + 1))
    if cfg.bus_constrained:
        cons.append(_bus_lmi(blocks, X, Y, Ct, Cv, R, plant, cfg, margin, n))

    prob = cp.Problem(cp.Maximize(gamma), cons)
    _solve(prob, cfg.solver, verbose)
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleProgramError(
            f"synthesis program infeasible (xdot_m={cfg.xdot_m})", tuple(blocks)
        )
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or gamma.value is None:
        raise SolverFailureError(f"SDP solver returned status {prob.status!r}")

    margins = {}
    for name, expr in blocks.items():
        val = np.atleast_2d(expr.value)
        margins[name] = float(np.min(np.linalg.eigvalsh(_sym(val)))) if val.size > 1 else float(val.item())
    return LmiVariables(
        X=_sym(X.value), Y=_sym(Y.value), A_t=np.array(At.value), B_t=np.array(Bt.value),
        C_t=np.array(Ct.value), beta=float(beta.value), gamma=float(gamma.value),
        A=A, B=B, C_y=Cy, state_scale=s, output_scale=sy, margins=margins,
    )


def _bus_lmi(blocks, X, Y, Ct, Cv, R, plant, cfg, margin, n):
    """Mean-square form of the conservative q-axis voltage constraint."""
    emf = plant.emf_coeff
    npl_2l = plant.inductive_coeff
    rhs = 0.5 * cfg.delta * cfg.v_s / 2.0  # sqrt of (1/4)(delta V_s / 2)^2
    z = np.zeros
    row = [
        np.ones((1, 1)),
        (R * Ct + emf * Cv @ X) / rhs,
        emf * Cv / rhs,
        cfg.xdot_m * npl_2l * Ct / rhs,
        z((1, n)),
    ]
    I = np.eye(n)
    lmi6 = cp.bmat([
        row,
        [row[1].T, X, I, z((n, n)), z((n, n))],
        [row[2].T, I, Y, z((n, n)), z((n, n))],
        [row[3].T, z((n, n)), z((n, n)), X, I],
        [z((n, 1)), z((n, n)), z((n, n)), I, Y],
    ])
    blocks["lmi6"] = lmi6
    return _sym(lmi6) >> margin(I, emf * Cv / rhs) * np.eye(4 * n + 1)


def _solve(prob, solver, verbose):
    order = [solver] + [s for s in ("CVXOPT", "CLARABEL", "SCS") if s != solver]
    last = None
    for name in order:
        if name not in cp.installed_solvers():
            continue
        try:
            prob.solve(solver=name, verbose=verbose)
        except cp.error.SolverError as exc:
            last = exc
            continue
        if prob.status in (cp.OPTIMAL, cp.INFEASIBLE):
            return
    if prob.status is None:
        raise SolverFailureError(f"all SDP solvers failed: {last}")


# ---------------------------------------------------------------------------
# controller recovery


def recover_controller(vars: LmiVariables) -> ControllerQ:
    """Invert the change of variables for one valid (M, N) factorization.

    Uses the SVD of I - XY so that M N' = I - XY with both factors equally
    conditioned. The returned controller takes the unscaled measurement.
    """
    X, Y = vars.X, vars.Y
    n = X.shape[0]
    E = np.eye(n) - X @ Y
    U, sv, Vt = np.linalg.svd(E)
    if sv[-1] <= 1e-10 * max(1.0, sv[0]):
        raise DegenerateFactorizationError(
            f"I - XY is numerically singular (smallest singular value {sv[-1]:.3e})"
        )
    root = np.sqrt(sv)
    M = U * root
    N = Vt.T * root
    return _controller_from_factors(vars, M, N)


def _controller_from_factors(vars: LmiVariables, M, N) -> ControllerQ:
    X, Y, A, B, Cy = vars.X, vars.Y, vars.A, vars.B, vars.C_y
    core = vars.A_t - Y @ A @ X - vars.B_t @ Cy @ X - Y @ B @ vars.C_t
    MinvT = np.linalg.inv(M).T
    A_K = np.linalg.solve(N, core) @ MinvT
    B_K = np.linalg.solve(N, vars.B_t) / vars.output_scale
    C_K = vars.C_t @ MinvT
    return ControllerQ(A_K, B_K, C_K)


# ---------------------------------------------------------------------------
# stochastic linearization of Coulomb friction


def equivalent_A(sigma: np.ndarray, plant_base: StateSpace) -> np.ndarray:
    """Gaussian-equivalent drift: A + sqrt(2/pi) F C_v / sqrt(C_v Sigma C_v')."""
    n = plant_base.n_states
    var_v = (plant_base.C_v @ sigma[:n, :n] @ plant_base.C_v.T).item()
    if not var_v > 0:
        raise FixedPointError("velocity variance must be positive for the friction equivalent")
    return plant_base.A + SQRT_2_OVER_PI * (plant_base.F @ plant_base.C_v) / math.sqrt(var_v)


def _closed_loop(plant: StateSpace, K: ControllerQ, A_plant: np.ndarray, C_y: np.ndarray):
    A_cl = np.block([[A_plant, plant.B @ K.C_K], [K.B_K @ C_y, K.A_K]])
    Bw_cl = np.vstack([plant.B_w, np.zeros((K.order, plant.B_w.shape[1]))])
    return A_cl, Bw_cl @ Bw_cl.T


def stationary_covariance(
    plant_base: StateSpace,
    K: ControllerQ,
    C_y: np.ndarray | None = None,
    *,
    relax: float = 0.5,
    tol: float = 1e-10,
    max_inner: int = 200,
    sigma0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the nonlinear Lyapunov-like equation for the closed-loop covariance.

    The friction gain depends on the velocity variance, so the covariance is
    found by damped Picard iteration. Without friction this is one solve.
    """
    C_y = plant_base.C_v if C_y is None else C_y
    A_cl, W = _closed_loop(plant_base, K, plant_base.A, C_y)
    if not np.any(plant_base.F):
        return solve_lyapunov(A_cl, W)
    sigma = solve_lyapunov(A_cl, W) if sigma0 is None else np.array(sigma0, float)
    for _ in range(max_inner):
        A_cl, _w = _closed_loop(plant_base, K, equivalent_A(sigma, plant_base), C_y)
        new = solve_lyapunov(A_cl, W)
        step = relax * (new - sigma)
        sigma = sigma + step
        # the drift depends on sigma only through the velocity variance
        if abs(step[1, 1]) <= tol * sigma[1, 1] and np.linalg.norm(step) <= tol * np.linalg.norm(sigma):
            # one undamped update so the returned matrix solves the equation exactly
            A_cl, _w = _closed_loop(plant_base, K, equivalent_A(sigma, plant_base), C_y)
            return solve_lyapunov(A_cl, W)
    raise FixedPointError(f"covariance fixed point not reached in {max_inner} iterations")


def lyap_like_residual(sigma, plant_base: StateSpace, K: ControllerQ, C_y=None) -> float:
    C_y = plant_base.C_v if C_y is None else C_y
    A_eq = equivalent_A(sigma, plant_base) if np.any(plant_base.F) else plant_base.A
    A_cl, W = _closed_loop(plant_base, K, A_eq, C_y)
    return lyapunov_residual(A_cl, sigma, W) / max(np.linalg.norm(W), 1e-300)


# ---------------------------------------------------------------------------
# iterative design


def iterate_design(
    params: PlantParams, cfg: SynthesisConfig | None = None, *, verbose: bool = False
) -> SynthesisResult:
    """Alternate SDP solves and friction re-linearization until gamma settles.

    Step 0 designs against the friction-free drift; each further pass solves
    the covariance fixed point for the current controller, rebuilds the
    equivalent drift, and re-solves. Stops when |delta gamma| < tol_gamma.
    If gamma starts to oscillate, the drift update is under-relaxed.
    """
    cfg = cfg or SynthesisConfig.from_params(params)
    meas = params.measurement
    base = assemble_plant(params.mech, params.transducer, params.disturbance, "backdriven")
    A_eq = base.A
    trace: list[float] = []
    best = None
    relax = 1.0
    deltas: list[float] = []
    sigma = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        plant = base.with_A(A_eq)
        vars_ = solve_op(plant, meas, cfg, solve_care(plant.A, plant.B, plant.C, plant.R))
        K = recover_controller(vars_)
        trace.append(vars_.gamma)
        log.debug("iteration %d: gamma = %.9g", it, vars_.gamma)
        if not np.any(base.F):
            sigma = stationary_covariance(base, K, meas.C_y)
            best = (K, vars_, sigma, plant)
            converged = True
            break
        try:
            sigma = stationary_covariance(base, K, meas.C_y, sigma0=sigma)
        except FixedPointError:
            sigma = stationary_covariance(base, K, meas.C_y, relax=0.1, max_inner=2000)
        best = (K, vars_, sigma, plant)
        if len(trace) >= 2:
            d = trace[-1] - trace[-2]
            if abs(d) < cfg.tol_gamma:
                converged = True
                break
            deltas.append(d)
            if len(deltas) >= 3 and all(
                np.sign(deltas[-i]) != np.sign(deltas[-i - 1]) for i in (1, 2)
            ):
                relax *= 0.5
                deltas.clear()
        A_eq = A_eq + relax * (equivalent_A(sigma, base) - A_eq)
    K, vars_, sigma, plant = best
    return SynthesisResult(K, vars_, sigma, trace, it, converged, plant, cfg, meas)


# ---------------------------------------------------------------------------
# report document


REPORT_VERSION = 1


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def synthesis_report(res: SynthesisResult, params: PlantParams | None = None) -> dict[str, Any]:
    """Plain-data summary of a design: gamma history, certified moments, margins and the controller."""
    moments = closed_loop_moments(res.plant, res.controller, res.meas)
    doc = {
        "version": REPORT_VERSION,
        "gamma": res.gamma,
        "gamma_trace": list(res.gamma_trace),
        "iterations": res.iterations,
        "converged": res.converged,
        "config": {k: _jsonable(v) for k, v in asdict(res.cfg).items()},
        "moments": {
            "ex2": moments.ex2,
            "eiq2": moments.eiq2,
            "p_gen_lin": moments.p_gen_lin,
        },
        "lmi_margins": dict(res.vars.margins),
        "beta": res.vars.beta,
        "controller": res.controller.to_dict(),
    }
    if params is not None:
        doc["params"] = params.to_dict()
    return doc


def write_report(path: str | Path, res: SynthesisResult, params: PlantParams | None = None) -> dict:
    doc = synthesis_report(res, params)
    # json emits the shortest round-tripping repr, so doubles survive exactly
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc


def read_controller(path: str | Path) -> ControllerQ:
    """Load a controller from a report (or a bare controller document)."""
    doc = json.loads(Path(path).read_text())
    return ControllerQ.from_dict(doc.get("controller", doc))


def read_report(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


def certified_plant(params: PlantParams, K: ControllerQ) -> StateSpace:
    """Linear plant on which a controller's guarantees are stated.

    With Coulomb friction this is the backdriven drift re-linearized at the
    stationary covariance the controller itself induces.
    """
    base = assemble_plant(params.mech, params.transducer, params.disturbance, "backdriven")
    if not np.any(base.F):
        return base
    sigma = stationary_covariance(base, K, params.measurement.C_y)
    return base.with_A(equivalent_A(sigma, base))
