"""scikit-learn style wrapper around design, runtime and simulation."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .params import PlantParams
from .runtime import DEFAULT_F_LP, VectorControlLaw
from .simulation import SimConfig, simulate
from .synthesis import SynthesisConfig, iterate_design


class HarvestingController(TransformerMixin, BaseEstimator):
    """Energy-harvesting current controller as an estimator.

    ``fit`` runs the iterative convex design for the plant described by
    ``params`` (with the flat overrides applied). ``transform`` runs the
    runtime law on a sequence of velocity measurements and returns the
    commanded, saturated and direct-axis currents per sample. ``score``
    simulates the nonlinear closed loop and returns the mean generated power.

    Parameters
    ----------
    xdot_m : float
        RMS velocity limit in m/s; 0 disables it.
    sigma_a, v_s, delta : float or None
        Overrides applied on top of ``params``; None keeps the value there.
    """

    def __init__(
        self,
        params: PlantParams | None = None,
        xdot_m: float = 0.0286,
        sigma_a: float | None = None,
        v_s: float | None = None,
        delta: float | None = None,
        eps_lmi: float = 1e-7,
        max_iters: int = 50,
        tol_gamma: float = 1e-5,
        solver: str = "CVXOPT",
        dt: float = 1.0 / 4096.0,
        f_lp: float = DEFAULT_F_LP,
    ):
        self.params = params
        self.xdot_m = xdot_m
        self.sigma_a = sigma_a
        self.v_s = v_s
        self.delta = delta
        self.eps_lmi = eps_lmi
        self.max_iters = max_iters
        self.tol_gamma = tol_gamma
        self.solver = solver
        self.dt = dt
        self.f_lp = f_lp

    def resolved_params(self) -> PlantParams:
        p = self.params if self.params is not None else PlantParams()
        overrides = {k: getattr(self, k) for k in ("sigma_a", "v_s", "delta") if getattr(self, k) is not None}
        return p.with_(**overrides) if overrides else p

    def fit(self, X=None, y=None):
        """Synthesize the controller. ``X`` and ``y`` are ignored."""
        if not (self.xdot_m >= 0 and math.isfinite(self.xdot_m)):
            raise ValueError("xdot_m must be a finite non-negative number")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        p = self.resolved_params()
        cfg = SynthesisConfig.from_params(
            p,
            xdot_m=self.xdot_m,
            eps_lmi=self.eps_lmi,
            max_iters=self.max_iters,
            tol_gamma=self.tol_gamma,
            solver=self.solver,
        )
        self.result_ = iterate_design(p, cfg)
        self.controller_ = self.result_.controller
        self.gamma_ = self.result_.gamma
        self.params_ = p
        self.n_features_in_ = p.measurement.n_outputs
        return self

    def transform(self, X):
        """Velocity measurements (n_samples, n_outputs) -> currents (n_samples, 3).

        Columns are i_q*, i_q and i_d, one row per control step of length ``dt``.
        """
        check_is_fitted(self, "controller_")
        X = check_array(X, ensure_2d=True, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} measurement columns, got {X.shape[1]}")
        law = VectorControlLaw(
            self.controller_, self.params_.transducer, self.params_.bus, self.f_lp,
            self.params_.measurement.T_vy,
        )
        state = law.new_state()
        out = np.empty((X.shape[0], 3))
        for i, row in enumerate(X):
            step = law.full_step(state, row, 0.0, self.dt)
            out[i] = step.i_q_star, step.i_q, step.i_d
        return out

    def predict(self, X):
        """Quadrature current actually applied for each measurement sample."""
        return self.transform(X)[:, 1]

    def simulate(self, duration: float = 1200.0, seed: int = 0, **sim_kwargs):
        check_is_fitted(self, "controller_")
        cfg = SimConfig(dt=self.dt, duration=duration, seed=seed, f_lp=self.f_lp, **sim_kwargs)
        return simulate(self.params_, self.controller_, cfg)

    def score(self, X=None, y=None, duration: float = 1200.0, seed: int = 0):
        """Mean generated power (W) of a simulated run; larger is better."""
        return self.simulate(duration, seed).p_gen_bar
