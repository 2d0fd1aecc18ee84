"""Command-line front end: ``pmsm-harvest {synth,simulate,sweep,verify,replay}``.

Exit codes: 0 success, 2 validation error, 3 solver failure, 4 numerical blow-up.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .params import ConfigError, PlantParams, load_config
from .simulation import (
    DEFAULT_SIGMA_A_GRID,
    DEFAULT_XDOT_M_GRID,
    SimConfig,
    SimulationBlowUp,
    simulate,
    sweep,
)
from .synthesis import SynthesisConfig, SynthesisError, iterate_design, read_controller, read_report, write_report
from .verify import run_checks

log = logging.getLogger("pmsm_harvest")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_BLOWUP = 4


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    resolved_params: dict
    seed: int | None
    tool_version: str
    output_dir: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=_json_default) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite_or_str(d):
    if isinstance(d, dict):
        return {k: _finite_or_str(v) for k, v in d.items()}
    if isinstance(d, float) and not math.isfinite(d):
        return repr(d)
    return d


# ---------------------------------------------------------------------------
# argument plumbing


def _float_or_inf(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def _grid(text: str) -> tuple[float, ...]:
    """``a,b,c`` or ``log:lo:hi:n`` or ``lin:lo:hi:n``."""
    try:
        if text.startswith(("log:", "lin:")):
            kind, lo, hi, n = text.split(":")
            fn = np.geomspace if kind == "log" else np.linspace
            return tuple(float(v) for v in fn(float(lo), float(hi), int(n)))
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid spec: {text!r}")


def _add_common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", type=Path, help="YAML/JSON parameter document")
    p.add_argument("--sigma-a", type=_float_or_inf, dest="sigma_a")
    p.add_argument("--vs", type=_float_or_inf, help="bus voltage in V, or inf")
    p.add_argument("--delta", type=_float_or_inf)
    p.add_argument("--out", type=Path, required=out_required)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_sim(p: argparse.ArgumentParser):
    p.add_argument("--duration", type=float, default=SimConfig.duration)
    p.add_argument("--dt", type=float, default=SimConfig.dt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--measurement-noise", action="store_true")
    p.add_argument("--decimation", type=int, default=SimConfig.record_decimation)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmsm-harvest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="design a controller and write its report")
    _add_common(p)
    p.add_argument("--xdot-m", type=float, default=SynthesisConfig.xdot_m, dest="xdot_m")

    p = sub.add_parser("simulate", help="simulate a designed controller")
    _add_common(p)
    p.add_argument("--controller", type=Path, required=True, help="report or controller JSON")
    _add_sim(p)

    p = sub.add_parser("sweep", help="design+simulate over an (xdot_m, sigma_a) grid")
    _add_common(p)
    p.add_argument("--xdot-grid", type=_grid, default=DEFAULT_XDOT_M_GRID)
    p.add_argument("--sigma-grid", type=_grid, default=DEFAULT_SIGMA_A_GRID)
    p.add_argument("--jobs", type=int, default=1)
    _add_sim(p)

    p = sub.add_parser("verify", help="run numerical self-checks and print a report")
    _add_common(p, out_required=False)
    p.add_argument("--controller", type=Path)
    p.add_argument("--xdot-m", type=float, default=SynthesisConfig.xdot_m, dest="xdot_m")
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    return parser


def resolve_params(args) -> PlantParams:
    """Flag > config file > built-in default."""
    params = load_config(args.config) if args.config else PlantParams()
    overrides = {}
    for flag, key in (("sigma_a", "sigma_a"), ("vs", "v_s"), ("delta", "delta")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return params.with_(**overrides) if overrides else params


def _sim_config(args) -> SimConfig:
    return SimConfig(
        dt=args.dt,
        duration=args.duration,
        seed=args.seed,
        noise_on_measurement=args.measurement_noise,
        record_decimation=args.decimation,
    )


def _check_duration(cfg: SimConfig, params: PlantParams):
    period = 2 * math.pi / params.disturbance.omega_a
    if cfg.duration < 10 * period:
        raise ConfigError("duration", f"must cover at least 10 disturbance periods ({10 * period:.3g} s)")


def _manifest(args, argv, params, seed=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        config_path=str(args.config) if getattr(args, "config", None) else None,
        resolved_params=_finite_or_str(params.to_dict()),
        seed=seed,
        tool_version=__version__,
        output_dir=str(args.out) if getattr(args, "out", None) else "",
        started=_now(),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv) -> int:
    params = resolve_params(args)
    cfg = SynthesisConfig.from_params(params, xdot_m=args.xdot_m)
    man = _manifest(args, argv, params)
    res = iterate_design(params, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    doc = write_report(args.out / "report.json", res, params)
    (args.out / "controller.json").write_text(json.dumps(res.controller.to_dict(), indent=2) + "\n")
    man.outputs = ["report.json", "controller.json"]
    man.summary = {"gamma": res.gamma, "iterations": res.iterations, "converged": res.converged}
    man.write(args.out)
    print(f"gamma = {res.gamma:.9g} W after {res.iterations} iterations (converged: {res.converged})")
    print(f"linear-model moments: {json.dumps(doc['moments'])}")
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    params = resolve_params(args)
    cfg = _sim_config(args)
    _check_duration(cfg, params)
    if not args.controller.exists():
        raise ConfigError("controller", f"no such file: {args.controller}")
    K = read_controller(args.controller)
    if K.B_K.shape[1] != params.measurement.n_outputs:
        raise ConfigError("controller", "controller input count does not match the measurement")
    man = _manifest(args, argv, params, cfg.seed)
    res = simulate(params, K, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    res.to_csv(args.out / "trajectory.csv")
    summary = res.summary()
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    man.outputs = ["trajectory.csv", "summary.json"]
    man.summary = summary
    man.write(args.out)
    print(f"p_gen_bar = {res.p_gen_bar:.6g} W, i_d loss = {res.mean_id_loss:.4g} W")
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    params = resolve_params(args)
    cfg = _sim_config(args)
    _check_duration(cfg, params)
    if not args.xdot_grid or not args.sigma_grid:
        raise ConfigError("grid", "sweep grids must be non-empty")
    man = _manifest(args, argv, params, cfg.seed)
    res = sweep(params, args.xdot_grid, args.sigma_grid, cfg, n_jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    res.to_csv(args.out / "sweep.csv")
    failures = [
        {"sigma_a": c.sigma_a, "xdot_m": c.xdot_m, "error": c.error} for c in res.cells if c.error
    ]
    ridge = [dict(zip(("sigma_a", "xdot_m", "pgen_bar", "gamma"), r)) for r in res.ridge]
    (args.out / "ridge.json").write_text(
        json.dumps({"ridge": ridge, "failures": failures}, indent=2) + "\n"
    )
    man.outputs = ["sweep.csv", "ridge.json"]
    man.summary = {"cells": len(res.cells), "failed": len(failures)}
    man.write(args.out)
    for r in ridge:
        print(f"sigma_a={r['sigma_a']:.4g}: best xdot_m={r['xdot_m']:.4g}, "
              f"p_gen_bar={r['pgen_bar']:.4g} W, gamma={r['gamma']:.4g} W")
    if failures:
        print(f"{len(failures)} cell(s) failed; see ridge.json")
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    params = resolve_params(args)
    K, gamma = None, None
    if args.controller:
        K = read_controller(args.controller)
        gamma = read_report(args.controller).get("gamma")
    report = run_checks(
        params, controller=K, gamma=gamma, xdot_m=args.xdot_m, duration=args.duration, seed=args.seed
    )
    for check in report:
        print(check.line())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "verify.json").write_text(
            json.dumps([asdict(c) for c in report], indent=2, default=_json_default) + "\n"
        )
        man = _manifest(args, argv, params, args.seed)
        man.outputs = ["verify.json"]
        man.summary = {"passed": sum(c.status == "pass" for c in report), "total": len(report)}
        man.write(args.out)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    doc = json.loads(args.manifest.read_text())
    return main(doc["argv"])


COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"error: invalid config at {exc.key}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SynthesisError as exc:
        print(f"error: synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (SimulationBlowUp, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
