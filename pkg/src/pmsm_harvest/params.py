"""Plant parameter containers and the YAML/JSON config loader.

All values are SI, exactly as tabulated for the harvester (no unit layer).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid or missing configuration entry; ``key`` names the offending path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _positive(key: str, value: float) -> None:
    if not (math.isfinite(value) or value == math.inf) or not value > 0:
        raise ConfigError(key, f"must be > 0, got {value!r}")


@dataclass(frozen=True)
class MechParams:
    m: float = 3000.0
    c: float = 942.47
    k: float = 1.1844e5

    def __post_init__(self):
        for name in ("m", "c", "k"):
            _positive(f"mech.{name}", getattr(self, name))


@dataclass(frozen=True)
class TransducerParams:
    R: float = 10.7
    L: float = 0.0219
    lambda_pm: float = 0.1603
    n_p: int = 6
    J: float = 3.54e-5
    B: float = 3.25e-4
    f_c: float = 35.0
    lead: float = 2.55e-3
    eta: float = 0.91
    i_cont: float = 2.0

    def __post_init__(self):
        for name in ("R", "L", "lambda_pm", "lead", "i_cont"):
            _positive(f"transducer.{name}", getattr(self, name))
        if not 0.0 < self.eta <= 1.0:
            # eta = 1 is the lossless limit used by the linear oracle
            raise ConfigError("transducer.eta", f"must lie in (0, 1], got {self.eta!r}")
        if self.f_c < 0:
            raise ConfigError("transducer.f_c", f"must be >= 0, got {self.f_c!r}")
        if self.J < 0 or self.B < 0:
            raise ConfigError("transducer.J" if self.J < 0 else "transducer.B", "must be >= 0")
        if int(self.n_p) != self.n_p or self.n_p < 2 or self.n_p % 2:
            raise ConfigError("transducer.n_p", f"must be an even integer >= 2, got {self.n_p!r}")

    @property
    def emf_constant(self) -> float:
        """Back-EMF coefficient N_p*lambda_pm/(2*lead) [V s/m] (q-axis)."""
        return self.n_p * self.lambda_pm / (2.0 * self.lead)

    @property
    def force_constant(self) -> float:
        """Force per ampere of q-axis current, 3*N_p*lambda_pm/(4*lead) [N/A]."""
        return 3.0 * self.n_p * self.lambda_pm / (4.0 * self.lead)

    @property
    def electrical_speed_ratio(self) -> float:
        """d(theta_re)/dt per unit of translational velocity [rad/m]."""
        return self.n_p / (2.0 * self.lead)


@dataclass(frozen=True)
class BusParams:
    """DC bus. ``v_s = inf`` disables every voltage-feasibility constraint."""

    v_s: float = 20.0
    delta: float = 0.95

    def __post_init__(self):
        if not self.v_s > 0:
            raise ConfigError("bus.v_s", f"must be > 0, got {self.v_s!r}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("bus.delta", f"must lie in (0, 1], got {self.delta!r}")

    @property
    def infinite(self) -> bool:
        return math.isinf(self.v_s)


@dataclass(frozen=True)
class DisturbanceParams:
    omega_a: float = 2.0 * math.pi
    zeta_a: float = 0.1
    sigma_a: float = 0.1

    def __post_init__(self):
        _positive("disturbance.omega_a", self.omega_a)
        _positive("disturbance.zeta_a", self.zeta_a)
        if not self.sigma_a >= 0:
            # sigma_a = 0 is allowed for the quiescent simulation case
            raise ConfigError("disturbance.sigma_a", f"must be >= 0, got {self.sigma_a!r}")

    @property
    def input_gain(self) -> float:
        return 2.0 * self.sigma_a * math.sqrt(self.zeta_a * self.omega_a)


@dataclass(frozen=True)
class MeasurementModel:
    """Velocity-only measurement y = C_y xi + n, n white with intensity ``phi_n``."""

    C_y: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0, 0.0, 0.0]]))
    phi_n: np.ndarray = field(default_factory=lambda: np.array([[1e-6]]))
    T_vy: np.ndarray = field(default_factory=lambda: np.array([[1.0]]))

    def __post_init__(self):
        C_y = np.atleast_2d(np.asarray(self.C_y, dtype=float))
        phi_n = np.atleast_2d(np.asarray(self.phi_n, dtype=float))
        T_vy = np.atleast_2d(np.asarray(self.T_vy, dtype=float))
        object.__setattr__(self, "C_y", C_y)
        object.__setattr__(self, "phi_n", phi_n)
        object.__setattr__(self, "T_vy", T_vy)
        ny = C_y.shape[0]
        if C_y.shape[1] != 4 or phi_n.shape != (ny, ny) or T_vy.shape != (1, ny):
            raise ConfigError("measurement", "inconsistent C_y / phi_n / T_vy shapes")
        if not np.allclose(phi_n, phi_n.T) or np.linalg.eigvalsh(phi_n).min() <= 0:
            raise ConfigError("measurement.phi_n", "must be symmetric positive definite")

    @property
    def n_outputs(self) -> int:
        return self.C_y.shape[0]


@dataclass(frozen=True)
class PlantParams:
    mech: MechParams = field(default_factory=MechParams)
    transducer: TransducerParams = field(default_factory=TransducerParams)
    bus: BusParams = field(default_factory=BusParams)
    disturbance: DisturbanceParams = field(default_factory=DisturbanceParams)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)

    def with_(self, **sections) -> "PlantParams":
        """Copy with selected leaf values replaced, e.g. ``with_(sigma_a=0.05, v_s=inf)``."""
        groups = {"mech": {}, "transducer": {}, "bus": {}, "disturbance": {}}
        for key, value in sections.items():
            for group in groups:
                if key in getattr(self, group).__dataclass_fields__:
                    groups[group][key] = value
                    break
            else:
                raise KeyError(key)
        return replace(
            self, **{g: replace(getattr(self, g), **kw) for g, kw in groups.items() if kw}
        )

    def to_dict(self) -> dict[str, Any]:
        out = {g: asdict(getattr(self, g)) for g in ("mech", "transducer", "bus", "disturbance")}
        out["measurement"] = {"phi_n": self.measurement.phi_n.tolist()}
        return out


_SCHEMA: dict[str, tuple[type, tuple[str, ...]]] = {
    "mech": (MechParams, ("m", "c", "k")),
    "transducer": (
        TransducerParams,
        ("R", "L", "lambda_pm", "n_p", "J", "B", "f_c", "lead", "eta", "i_cont"),
    ),
    "bus": (BusParams, ("v_s", "delta")),
    "disturbance": (DisturbanceParams, ("omega_a", "zeta_a", "sigma_a")),
}


def _as_number(key: str, value: Any) -> float:
    if isinstance(value, str) and value.strip().lower() in {"inf", "+inf", "infinity", ".inf"}:
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    return float(value)


def params_from_dict(doc: Mapping[str, Any]) -> PlantParams:
    """Build :class:`PlantParams` from a nested mapping; missing keys take defaults.

    Unknown sections or keys are rejected so typos cannot silently fall back.
    """
    if not isinstance(doc, Mapping):
        raise ConfigError("<root>", "config document must be a mapping")
    known = set(_SCHEMA) | {"measurement"}
    for section in doc:
        if section not in known:
            raise ConfigError(str(section), "unknown section")
    built = {}
    for section, (cls, keys) in _SCHEMA.items():
        raw = doc.get(section) or {}
        if not isinstance(raw, Mapping):
            raise ConfigError(section, "must be a mapping")
        kwargs = {}
        for key, value in raw.items():
            if key not in keys:
                raise ConfigError(f"{section}.{key}", "unknown key")
            number = _as_number(f"{section}.{key}", value)
            if key == "n_p":
                if number != int(number):
                    raise ConfigError("transducer.n_p", "must be an integer")
                number = int(number)
            kwargs[key] = number
        built[section] = cls(**kwargs)
    meas = doc.get("measurement") or {}
    if not isinstance(meas, Mapping):
        raise ConfigError("measurement", "must be a mapping")
    for key in meas:
        if key != "phi_n":
            raise ConfigError(f"measurement.{key}", "unknown key")
    if "phi_n" in meas:
        phi = meas["phi_n"]
        try:
            phi_arr = np.atleast_2d(np.asarray(phi, dtype=float))
        except (TypeError, ValueError):
            raise ConfigError("measurement.phi_n", f"expected a number or matrix, got {phi!r}")
        built["measurement"] = MeasurementModel(phi_n=phi_arr)
    return PlantParams(**built)


def load_config(path: str | Path) -> PlantParams:
    """Read a YAML (or JSON, which YAML subsumes) parameter document."""
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"unparseable config: {exc}") from exc
    return params_from_dict(doc or {})


def dump_config(params: PlantParams, path: str | Path) -> None:
    doc = params.to_dict()
    if math.isinf(doc["bus"]["v_s"]):
        doc["bus"]["v_s"] = "inf"
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
