"""Monte Carlo simulation of the closed nonlinear harvester and the design sweep."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernel as kern
from .params import PlantParams
from .runtime import DEFAULT_F_LP, lowpass_coefficient, zoh_discretize
from .synthesis import ControllerQ, SynthesisConfig, SynthesisError, iterate_design

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("t", "x", "xdot", "a", "iq_star", "iq", "id", "vd", "vq", "pgen", "pbar")
SWEEP_COLUMNS = ("sigma_a", "xdot_m", "gamma", "pgen_bar", "sat_frac", "weaken_frac")

DEFAULT_XDOT_M_GRID = tuple(np.geomspace(0.005, 0.12, 12))
DEFAULT_SIGMA_A_GRID = (0.0625, 0.075, 0.0875, 0.1, 0.1125, 0.125)


class SimulationBlowUp(FloatingPointError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 4096.0
    duration: float = 1200.0
    seed: int = 0
    noise_on_measurement: bool = False
    record_decimation: int = 41
    warmup: float = 30.0
    f_lp: float = DEFAULT_F_LP
    saturate: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.record_decimation < 1:
            raise ValueError("record_decimation must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class SimulationResult:
    """Decimated trajectories plus full-resolution statistics.

    Statistics other than ``p_gen_bar`` exclude the warm-up window.
    """

    series: dict[str, np.ndarray]
    p_gen_bar: float
    sat_fraction: float
    weaken_fraction: float
    peak_count: int
    peak_over_fraction: float
    min_margin_hat: float
    infeasible_true_fraction: float
    backdrive_fraction: float
    stuck_fraction: float
    mean_id_loss: float
    mean_power: float
    ex2: float
    eiq2: float
    steps: int
    dt: float

    def __len__(self):
        return len(self.series["t"])

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, TRAJECTORY_COLUMNS, np.column_stack([self.series[c] for c in TRAJECTORY_COLUMNS]))

    def summary(self) -> dict[str, float]:
        return {
            "p_gen_bar": self.p_gen_bar,
            "mean_id_loss": self.mean_id_loss,
            "sat_fraction": self.sat_fraction,
            "weaken_fraction": self.weaken_fraction,
            "peak_over_fraction": self.peak_over_fraction,
            "min_margin_hat": self.min_margin_hat,
            "infeasible_true_fraction": self.infeasible_true_fraction,
            "backdrive_fraction": self.backdrive_fraction,
            "ex2": self.ex2,
            "eiq2": self.eiq2,
        }


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow([format(float(v), ".17g") for v in r])


def white_noise_sequence(dt: float, n_steps: int, seed) -> np.ndarray:
    """Unit-intensity white noise held over each step: N(0, 1/dt) samples."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n_steps) / math.sqrt(dt)


def running_average_power(series, dt: float) -> np.ndarray:
    """(1/t) times the cumulative trapezoidal integral; the first sample is returned as is."""
    p = np.asarray(series, float)
    if p.size == 0:
        raise ValueError("empty series")
    out = np.empty_like(p)
    out[0] = p[0]
    if p.size > 1:
        integral = np.cumsum(0.5 * (p[1:] + p[:-1]) * dt)
        out[1:] = integral / (dt * np.arange(1, p.size))
    return out


def _noise_streams(cfg: SimConfig, n: int, phi_n: float):
    seq = np.random.SeedSequence(cfg.seed)
    w_seed, n_seed = seq.spawn(2)
    w = white_noise_sequence(cfg.dt, n, w_seed)
    if cfg.noise_on_measurement:
        meas = white_noise_sequence(cfg.dt, n, n_seed) * math.sqrt(phi_n)
    else:
        meas = np.zeros(n)
    return w, meas


def simulate(
    params: PlantParams, K: ControllerQ, cfg: SimConfig = SimConfig(), xi0=None, noise=None
):
    """Simulate the full nonlinear closed loop with instantaneous current tracking.

    ``noise`` optionally supplies the held disturbance samples (variance
    1/dt, one per step) instead of drawing them from ``cfg.seed``.
    """
    if K.B_K.shape[1] != params.measurement.n_outputs or K.order < 1:
        raise ValueError("controller input dimension does not match the measurement")
    if params.measurement.n_outputs != 1:
        raise ValueError("the simulator supports the velocity-only measurement")
    m, t, d, bus = params.mech, params.transducer, params.disturbance, params.bus
    if cfg.duration < 10 * 2 * math.pi / d.omega_a:
        raise ValueError("duration must cover at least 10 disturbance periods")
    n = cfg.n_steps
    w, n_meas = _noise_streams(cfg, n, float(params.measurement.phi_n[0, 0]))
    if noise is not None:
        w = np.ascontiguousarray(noise, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"noise must have shape ({n},)")
    Ad, Bd = zoh_discretize(K.A_K, K.B_K, cfg.dt)
    mp = np.array([m.m, m.c, m.k, t.J, t.B, t.f_c, t.lead, t.eta, d.omega_a, d.zeta_a])
    ep = np.array([t.R, t.L, t.lambda_pm, float(t.n_p), t.lead, bus.v_s, bus.delta])
    n_rec = (n + cfg.record_decimation - 1) // cfg.record_decimation
    rec = np.zeros((n_rec, len(TRAJECTORY_COLUMNS)))
    stats = np.zeros(kern.N_STATS)
    xi0 = np.zeros(4) if xi0 is None else np.asarray(xi0, float)
    warm = min(int(round(cfg.warmup / cfg.dt)), max(n - 2, 0))
    done = kern.run_kernel(
        xi0, mp, ep, d.input_gain, Ad, Bd[:, 0].copy(), K.C_K[0].copy(),
        lowpass_coefficient(cfg.f_lp, cfg.dt), w, n_meas, cfg.dt, t.i_cont,
        cfg.saturate, warm, cfg.record_decimation, rec, stats,
    )
    status = int(stats[kern.ST_STATUS])
    if status == kern.STATUS_BLOWUP:
        raise SimulationBlowUp(f"state exceeded 1e9 at t = {done * cfg.dt:.6g} s")
    if status == kern.STATUS_RADICAND:
        raise FloatingPointError(f"field-weakening radicand negative at t = {done * cfg.dt:.6g} s")
    counted = max(stats[kern.ST_COUNTED], 1.0)
    moving = max(stats[kern.ST_MOVING], 1.0)
    series = {c: rec[:, i].copy() for i, c in enumerate(TRAJECTORY_COLUMNS)}
    p_bar = stats[kern.ST_P_INTEGRAL] / ((n - 1) * cfg.dt) if n > 1 else series["pgen"][0]
    return SimulationResult(
        series=series,
        p_gen_bar=float(p_bar),
        sat_fraction=stats[kern.ST_SAT] / counted,
        weaken_fraction=stats[kern.ST_WEAKEN] / counted,
        peak_count=int(stats[kern.ST_PEAKS]),
        peak_over_fraction=stats[kern.ST_PEAKS_OVER] / max(stats[kern.ST_PEAKS], 1.0),
        min_margin_hat=float(stats[kern.ST_MIN_MARGIN_HAT]),
        infeasible_true_fraction=stats[kern.ST_INFEASIBLE_TRUE] / counted,
        backdrive_fraction=stats[kern.ST_P_NEG] / moving,
        stuck_fraction=stats[kern.ST_STUCK] / counted,
        mean_id_loss=1.5 * t.R * stats[kern.ST_ID2_SUM] / counted,
        mean_power=stats[kern.ST_P_SUM] / counted,
        ex2=stats[kern.ST_XD2_SUM] / counted,
        eiq2=stats[kern.ST_IQ2_SUM] / counted,
        steps=done,
        dt=cfg.dt,
    )


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepCell:
    sigma_a: float
    xdot_m: float
    gamma: float = math.nan
    p_gen_bar: float = math.nan
    sat_frac: float = math.nan
    weaken_frac: float = math.nan
    min_margin_hat: float = math.nan
    converged: bool = False
    iterations: int = 0
    error: str | None = None


@dataclass
class SweepResult:
    sigma_a: np.ndarray
    xdot_m: np.ndarray
    cells: list[SweepCell] = field(default_factory=list)

    def grid(self, attr: str) -> np.ndarray:
        """``attr`` arranged as (len(sigma_a), len(xdot_m))."""
        out = np.full((len(self.sigma_a), len(self.xdot_m)), np.nan)
        for idx, cell in enumerate(self.cells):
            out[idx // len(self.xdot_m), idx % len(self.xdot_m)] = getattr(cell, attr)
        return out

    @property
    def ridge(self) -> list[tuple[float, float, float, float]]:
        """Per sigma_a: (sigma_a, best xdot_m, p_gen_bar there, gamma there)."""
        p, g = self.grid("p_gen_bar"), self.grid("gamma")
        out = []
        for i, s in enumerate(self.sigma_a):
            row = np.where(np.isfinite(p[i]), p[i], -np.inf)
            j = int(np.argmax(row))
            out.append((float(s), float(self.xdot_m[j]), float(p[i, j]), float(g[i, j])))
        return out

    def ridge_indices(self) -> list[int]:
        p = self.grid("p_gen_bar")
        return [int(np.argmax(np.where(np.isfinite(r), r, -np.inf))) for r in p]

    def to_csv(self, path) -> None:
        rows = [[c.sigma_a, c.xdot_m, c.gamma, c.p_gen_bar, c.sat_frac, c.weaken_frac] for c in self.cells]
        write_csv(path, SWEEP_COLUMNS, rows)


def _run_cell(args):
    params, sigma_a, xdot_m, synth_overrides, sim_cfg, cell_seed = args
    cell = SweepCell(sigma_a, xdot_m)
    p = params.with_(sigma_a=sigma_a)
    try:
        res = iterate_design(p, SynthesisConfig.from_params(p, xdot_m=xdot_m, **synth_overrides))
        cell.gamma, cell.converged, cell.iterations = res.gamma, res.converged, res.iterations
        sim = simulate(p, res.controller, _with_seed(sim_cfg, cell_seed))
        cell.p_gen_bar = sim.p_gen_bar
        cell.sat_frac, cell.weaken_frac = sim.sat_fraction, sim.weaken_fraction
        cell.min_margin_hat = sim.min_margin_hat
    except (SynthesisError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("sweep cell sigma_a=%g xdot_m=%g failed: %s", sigma_a, xdot_m, exc)
    return cell


def _with_seed(cfg: SimConfig, seed: int) -> SimConfig:
    return replace(cfg, seed=seed)


def cell_seed(seed: int, index: int) -> int:
    """Stream seed for grid row ``index``; independent of execution order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def sweep(
    params: PlantParams,
    xdot_m_grid=DEFAULT_XDOT_M_GRID,
    sigma_a_grid=DEFAULT_SIGMA_A_GRID,
    cfg: SimConfig = SimConfig(),
    n_jobs: int = 1,
    synth_overrides: dict | None = None,
) -> SweepResult:
    """Design and simulate every (sigma_a, xdot_m) pair; failed cells are kept with ``error`` set.

    All cells in one sigma_a row share a noise stream derived from (seed, row
    index). The ridge compares cells within a row, and common random numbers
    keep Monte Carlo noise from deciding the argmax.
    """
    xs = np.asarray(xdot_m_grid, float)
    ss = np.asarray(sigma_a_grid, float)
    if xs.size == 0 or ss.size == 0:
        raise ValueError("sweep grids must be non-empty")
    jobs = [
        (params, float(s), float(x), dict(synth_overrides or {}), cfg, cell_seed(cfg.seed, i))
        for i, s in enumerate(ss)
        for x in xs
    ]
    if n_jobs == 1:
        cells = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cells = list(pool.map(_run_cell, jobs))
    return SweepResult(ss, xs, cells)


def batch_mean_error(series, n_batches: int = 20) -> tuple[float, float]:
    """Mean and batch-means standard error of a correlated stationary series."""
    x = np.asarray(series, float)
    if x.size < n_batches:
        raise ValueError("series shorter than the number of batches")
    means = np.array([b.mean() for b in np.array_split(x, n_batches)])
    return float(x.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))
