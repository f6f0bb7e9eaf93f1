"""Batch front end: ``fwclosure run|validate|kernels <config.toml>``.

A configuration is a TOML document with a ``scenario`` key and the tables
``parameters``, ``integrator`` and ``output``.  Every run writes a
``manifest.toml`` holding the fully resolved configuration, which is itself
a valid configuration.

Exit codes: 0 success, 1 invalid configuration, 2 non-unique switch,
3 file-system error, 4 any other numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import memory
from . import scenarios as sc
from . import string_kernels as sk
from .errors import ConfigError, NonUniqueSwitchError
from .hybrid import IntegratorConfig, simulate
from .model import ModeLabel

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FWCLOSURE_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONUNIQUE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_STRING_KEYS = {"c": 1.0, "beta": 0.03, "gamma_nl": 0.0, "xi": 0.4, "n_modes": 1}

PARAMETER_DEFAULTS = {
    "linear_string": {
        "c": 1.0,
        "xi": 0.4,
        "n_modes": 8,
        "beta": 0.0,
        "model": "modal",
        "step_time": 0.0,
        "step_size": 1.0,
    },
    "string_kernels": {
        **_STRING_KEYS,
        "cbar": 1.0,
        "terms": 100_000,
        "t_min": 1e-3,
        "t_max": 3.0,
        "points": 3000,
        "spacing": "linear",
    },
    "nonlinear_string_frf": {
        **_STRING_KEYS,
        "gamma_nl": 2.0,
        "amplitude": 2.5,
        "omega_min": 2.0,
        "omega_max": 12.0,
        "omega_points": 21,
        "directions": ["up", "down"],
        "model": "kappa",
        "lplus_scale": 1.0,
        "window_periods": 10,
        "tol": 5e-3,
        "max_periods": 2000,
        "points_per_period": 100,
    },
    "friction": {
        "lplus": 0.05,
        "sigma": 50.0,
        "beta": 0.03,
        "linf": 1.0,
        "alpha": 0.5,
        "v0": 1.0,
        "stiffness": math.pi**2,
        "y0": [],
        "mode0": "",
        "lambda0": 0.0,
    },
    "twofold": {
        "v_minus": -2.0,
        "v_plus": -1.1,
        "sigma": 10.0,
        "lplus": [0.05, 0.0, 0.0],
        "y0": [0.0, 1.0, 0.8, 0.16111111111111112],
        "mode0": "SLIDING",
        "lambda0": 0.1111111111111111,
    },
}

INTEGRATOR_DEFAULTS = {
    "dt": 1e-3,
    "t_span": [0.0, 10.0],
    "event_tol": 1e-10,
    "h_tol": 1e-9,
    "lambda_tol": 1e-9,
    "max_events": 100_000,
    "graze_tol": 1e-6,
    "scan_points": 8,
    "stop_on_exit": False,
    "record_every": 1,
    "workers": 1,
}

OUTPUT_DEFAULTS = {"directory": "output", "formats": ["csv", "jsonl"]}

_FORMATS = {"csv", "jsonl"}


# --------------------------------------------------------------------------
# configuration


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    _check_keys(given, defaults, where)
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        ref = defaults[key]
        if isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
        elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            if isinstance(ref, int) and not isinstance(ref, bool) and isinstance(val, float) and key != "stiffness":
                if not float(val).is_integer():
                    raise ConfigError(f"{where}.{key} must be an integer")
                val = int(val)
            if isinstance(ref, float):
                val = float(val)
        elif isinstance(ref, str) and not isinstance(val, str):
            raise ConfigError(f"{where}.{key} must be a string")
        elif isinstance(ref, list):
            if not isinstance(val, list):
                raise ConfigError(f"{where}.{key} must be an array")
        out[key] = val
    return out


def resolve_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys and check every precondition.

    Raises
    ------
    ConfigError
    """
    _check_keys(raw, {"scenario", "parameters", "integrator", "output", "provenance"}, "config")
    scenario = raw.get("scenario")
    if scenario not in PARAMETER_DEFAULTS:
        raise ConfigError(f"scenario must be one of {sorted(PARAMETER_DEFAULTS)}, got {scenario!r}")
    params = _merge(PARAMETER_DEFAULTS[scenario], raw.get("parameters", {}), "parameters")
    integ = _merge(INTEGRATOR_DEFAULTS, raw.get("integrator", {}), "integrator")
    out = _merge(OUTPUT_DEFAULTS, raw.get("output", {}), "output")
    cfg = {"scenario": scenario, "parameters": params, "integrator": integ, "output": out}
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    """Run the builders' own checks on the resolved configuration."""
    scenario, p, integ = cfg["scenario"], cfg["parameters"], cfg["integrator"]
    bad = set(cfg["output"]["formats"]) - _FORMATS
    if bad:
        raise ConfigError(f"unsupported output formats: {sorted(bad)}")
    span = integ["t_span"]
    if len(span) != 2 or not all(isinstance(v, (int, float)) for v in span) or not span[1] > span[0]:
        raise ConfigError("integrator.t_span must be [t0, t1] with t1 > t0")
    if integ["record_every"] < 1 or integ["workers"] < 1:
        raise ConfigError("integrator.record_every and integrator.workers must be >= 1")
    try:
        _integrator_config(integ)
        if scenario in ("string_kernels", "nonlinear_string_frf"):
            sp = _string_params(p)
        if scenario == "linear_string":
            sc.build_linear_string_modal(p["c"], p["xi"], p["n_modes"])
            sk.StringParams(c=p["c"], beta=p["beta"], xi=p["xi"], n_modes=p["n_modes"])
            if p["model"] not in ("modal", "full_memory", "kappa"):
                raise ConfigError("parameters.model must be 'modal', 'full_memory' or 'kappa'")
            if p["model"] == "modal" and p["beta"] != 0:
                raise ConfigError("the modal solution is undamped; set beta = 0 or pick a memory model")
        elif scenario == "string_kernels":
            if not 0 < p["t_min"] < p["t_max"] or p["points"] < 1:
                raise ConfigError("need 0 < t_min < t_max and points >= 1")
            if p["spacing"] not in ("linear", "log"):
                raise ConfigError("parameters.spacing must be 'linear' or 'log'")
            if p["terms"] < 1 or not p["cbar"] > 0:
                raise ConfigError("need terms >= 1 and cbar > 0")
        elif scenario == "nonlinear_string_frf":
            if not 0 < p["omega_min"] <= p["omega_max"] or p["omega_points"] < 1:
                raise ConfigError("need 0 < omega_min <= omega_max and omega_points >= 1")
            if not set(p["directions"]) <= {"up", "down"} or not p["directions"]:
                raise ConfigError("parameters.directions must be a non-empty subset of ['up', 'down']")
            if p["model"] not in ("kappa", "full"):
                raise ConfigError("parameters.model must be 'kappa' or 'full'")
            if p["model"] == "full" and sp.beta == 0:
                raise ConfigError("full memory needs beta > 0 for a finite memory horizon")
        elif scenario == "friction":
            model = _build_friction(p)
            _initial_state(model, p, default=sc.friction_steady_slip(model) + np.array([0.01, 0.0, 0.0]))
        elif scenario == "twofold":
            model = _build_twofold(p)
            _initial_state(model, p, default=None)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _string_params(p: dict) -> sk.StringParams:
    return sk.StringParams(**{k: p[k] for k in _STRING_KEYS})


def _integrator_config(integ: dict) -> IntegratorConfig:
    keys = ("dt", "event_tol", "h_tol", "lambda_tol", "max_events", "graze_tol", "scan_points", "stop_on_exit")
    return IntegratorConfig(**{k: integ[k] for k in keys})


def _build_friction(p: dict):
    keys = ("lplus", "sigma", "beta", "linf", "alpha", "v0", "stiffness")
    return sc.build_friction_oscillator(**{k: p[k] for k in keys})


def _build_twofold(p: dict):
    return sc.build_twofold(p["v_minus"], p["v_plus"], p["sigma"], p["lplus"])


def _initial_state(model, p: dict, default):
    y0 = p["y0"] if p["y0"] else default
    if y0 is None:
        raise ConfigError("parameters.y0 is required")
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (model.dim,):
        raise ConfigError(f"parameters.y0 must have {model.dim} entries")
    if p["mode0"]:
        try:
            mode = ModeLabel(p["mode0"])
        except ValueError as exc:
            raise ConfigError(f"parameters.mode0 must be one of {[m.value for m in ModeLabel]}") from exc
    else:
        mode = ModeLabel.free(1 if model.h(y0) > 0 else -1)
    return y0, mode


def load_config(path) -> dict:
    """Read and resolve a configuration file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return resolve_config(raw)


def output_directory(cfg: dict) -> Path:
    """Output directory, relative to the override root when it is set."""
    directory = Path(cfg["output"]["directory"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / (directory.name if directory.is_absolute() else directory)
    return directory


# --------------------------------------------------------------------------
# serialization


def fmt(x) -> str:
    """17 significant digits, or an empty field for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def trajectory_rows(traj, model=None):
    """Header and rows ``t, y1..yn, lambda, kappa, mode``."""
    y = np.asarray(traj.y)
    kappa = traj.kappa
    if model is not None and model.kappa_index is not None:
        y, kappa = model.split_kappa(y)
    n = y.shape[1]
    header = ["t", *[f"y{i + 1}" for i in range(n)], "lambda", "kappa", "mode"]
    rows = []
    for i in range(len(traj.t)):
        mode = traj.mode[i].value if traj.mode is not None else ""
        k = None if kappa is None else kappa[i]
        rows.append([traj.t[i], *y[i], traj.lam[i], k, mode])
    return header, rows


def write_events(path: Path, events) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(ev.record(), sort_keys=True) + "\n")


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(path: Path, cfg: dict, provenance: dict) -> None:
    doc = _plain(copy.deepcopy(cfg))
    doc["provenance"] = _plain(provenance)
    with open(path, "wb") as fh:
        tomli_w.dump(doc, fh)


# --------------------------------------------------------------------------
# scenarios


def _run_linear_string(cfg, outdir, written):
    p, integ = cfg["parameters"], cfg["integrator"]
    t0, t1 = integ["t_span"]
    dt = integ["dt"]
    steps = int(round((t1 - t0) / dt))
    prov = {}
    if p["model"] == "modal":
        ls = sc.build_linear_string_modal(p["c"], p["xi"], p["n_modes"])
        t = t0 + dt * np.arange(0, steps + 1, integ["record_every"])
        tau = np.maximum(t - p["step_time"], 0.0)
        ph = np.outer(tau, ls.omega)
        amp = 2.0 * p["step_size"] * ls.shape / ls.omega**2
        z = (1.0 - np.cos(ph)) * amp
        v = np.sin(ph) * amp * ls.omega
        lam = np.where(t >= p["step_time"], p["step_size"], 0.0)
        header = ["t", *[f"y{i + 1}" for i in range(2 * ls.n_modes)], "lambda", "kappa", "mode"]
        rows = [[t[i], *z[i], *v[i], lam[i], None, ""] for i in range(t.size)]
        contact = ls.contact_displacement(z)
        exact = p["step_size"] * np.asarray(sc.dalembert_contact_displacement(ls.c, ls.xi, tau))
        events = []
        prov["max_oracle_difference"] = float(np.max(np.abs(contact - exact)))
    else:
        sp = sk.StringParams(c=p["c"], beta=p["beta"], xi=p["xi"], n_modes=p["n_modes"])
        forcing = memory.Forcing.step(p["step_time"], p["step_size"])
        y0 = np.zeros(sp.dim)
        if p["model"] == "kappa":
            traj = memory.simulate_kappa(sp, y0, forcing, (t0, t1), dt, record_every=integ["record_every"])
        else:
            traj = memory.simulate_full_memory(sp, y0, forcing, (t0, t1), dt, record_every=integ["record_every"])
        header, rows = trajectory_rows(traj)
        t = traj.t
        contact = traj.y[:, 0]
        exact = p["step_size"] * np.asarray(sc.dalembert_contact_displacement(sp.c, sp.xi, np.maximum(t - p["step_time"], 0.0)))
        events = traj.events
        prov["lplus"] = sk.lplus(sp, sp.c)
        prov["linf"] = sk.linf(sp).tolist()
    _write_trajectory(cfg, outdir, header, rows, events, written)
    if "csv" in cfg["output"]["formats"]:
        write_csv(outdir / "contact.csv", ["t", "contact", "exact_undamped"], zip(t, contact, exact))
        written.append("contact.csv")
    return prov


def _kernel_grid(p):
    if p["spacing"] == "log":
        return np.geomspace(p["t_min"], p["t_max"], p["points"])
    return np.linspace(p["t_min"], p["t_max"], p["points"])


def _run_kernels(cfg, outdir, written):
    p = cfg["parameters"]
    sp = _string_params(p)
    cbar, terms = p["cbar"], p["terms"]
    t = _kernel_grid(p)
    val = sk.kernel_l0(sp, cbar, t, terms)
    rate = sk.kernel_l0_rate(sp, cbar, t, terms)
    expo = sk.kernel_l0_exp(sp, cbar, t)
    bound = np.array([sk.kernel_l0_tail_bound(sp, cbar, float(ti), terms) for ti in t])
    if "csv" in cfg["output"]["formats"]:
        write_csv(outdir / "kernels.csv", ["t", "kernel", "kernel_rate", "kernel_exp", "tail_bound"], zip(t, val, rate, expo, bound))
        written.append("kernels.csv")
    lm = sk.lminus(sp, cbar, terms)
    return {
        "terms": terms,
        "lplus": sk.lplus(sp, cbar),
        "lminus": lm.value,
        "lminus_tail_bound": lm.tail_bound,
        "abel_limit": sk.kernel_abel_limit(sp, cbar),
        "sigma": sk.memory_rate(sp, cbar),
        "linf": sk.linf(sp).tolist(),
        "max_kernel_tail_bound": float(bound.max()),
    }


def _run_frf(cfg, outdir, written):
    p, integ = cfg["parameters"], cfg["integrator"]
    sp = _string_params(p)
    omegas = np.linspace(p["omega_min"], p["omega_max"], p["omega_points"])
    common = dict(
        amplitude=p["amplitude"],
        model=p["model"],
        lplus_scale=p["lplus_scale"],
        window_periods=p["window_periods"],
        tol=p["tol"],
        max_periods=p["max_periods"],
        points_per_period=p["points_per_period"],
    )
    results = {}
    if set(p["directions"]) == {"up", "down"}:
        up, down, bistable = sc.hysteresis_sweep(sp, omegas, workers=integ["workers"], **common)
        results = {"up": up, "down": down}
    else:
        d = p["directions"][0]
        results[d] = sc.frequency_sweep(sp, omegas, direction=d, **common)
        bistable = None
    header = ["omega"]
    cols = [omegas]
    for d in ("up", "down"):
        if d in results:
            header += [f"amplitude_{d}", f"converged_{d}"]
            cols += [results[d].amplitude, results[d].converged.astype(float)]
    if bistable is not None:
        header.append("bistable")
        cols.append(bistable.astype(float))
    if "csv" in cfg["output"]["formats"]:
        write_csv(outdir / "sweep.csv", header, zip(*cols))
        written.append("sweep.csv")
    return {"lplus": sk.lplus(sp, sp.c), "sigma": sk.memory_rate(sp, sp.c), "linf": sk.linf(sp).tolist()}


def _run_switched(cfg, outdir, written):
    p, integ = cfg["parameters"], cfg["integrator"]
    if cfg["scenario"] == "friction":
        model = _build_friction(p)
        default = sc.friction_steady_slip(model) + np.array([0.01, 0.0, 0.0])
    else:
        model = _build_twofold(p)
        default = None
    y0, mode = _initial_state(model, p, default)
    traj = simulate(model, y0, mode, p["lambda0"], tuple(integ["t_span"]), _integrator_config(integ))
    if integ["record_every"] > 1:
        keep = np.arange(0, len(traj.t), integ["record_every"])
        if keep[-1] != len(traj.t) - 1:
            keep = np.append(keep, len(traj.t) - 1)
        traj.t, traj.y, traj.lam = traj.t[keep], traj.y[keep], traj.lam[keep]
        traj.mode = [traj.mode[i] for i in keep]
    header, rows = trajectory_rows(traj, model)
    _write_trajectory(cfg, outdir, header, rows, traj.events, written)
    cases = sorted({str(e.data.get("case")) for e in traj.events if "case" in e.data})
    return {"modes_visited": sorted(traj.modes_visited()), "uniqueness_cases": cases, "events": len(traj.events)}


def _write_trajectory(cfg, outdir, header, rows, events, written):
    formats = cfg["output"]["formats"]
    if "csv" in formats:
        write_csv(outdir / "trajectory.csv", header, rows)
        written.append("trajectory.csv")
    if "jsonl" in formats:
        write_events(outdir / "events.jsonl", events)
        written.append("events.jsonl")


_RUNNERS = {
    "linear_string": _run_linear_string,
    "string_kernels": _run_kernels,
    "nonlinear_string_frf": _run_frf,
    "friction": _run_switched,
    "twofold": _run_switched,
}


def execute(cfg: dict) -> Path:
    """Run a resolved configuration and write its outputs."""
    outdir = output_directory(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    prov = _RUNNERS[cfg["scenario"]](cfg, outdir, written)
    prov = {"version": __version__, "files": sorted(written), **prov}
    write_manifest(outdir / "manifest.toml", cfg, prov)
    return outdir


# --------------------------------------------------------------------------
# entry point


def _error_record(code: int, exc: BaseException, extra=None) -> dict:
    rec = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if extra:
        rec.update(extra)
    return rec


def _report(rec: dict, outdir: Path | None) -> None:
    text = json.dumps(rec, sort_keys=True)
    print(text, file=sys.stderr)
    if outdir is None:
        return
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "error.json").write_text(text + "\n", encoding="utf-8")
    except OSError:
        pass


def _nonunique_extra(exc: NonUniqueSwitchError, outdir: Path) -> dict:
    extra = {"diagnostics": _plain(exc.diagnostics)}
    if exc.trajectory is not None:
        try:
            header, rows = trajectory_rows(exc.trajectory)
            write_csv(outdir / "trajectory_partial.csv", header, rows)
            write_events(outdir / "events_partial.jsonl", exc.trajectory.events)
        except OSError:
            pass
    return extra


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fwclosure", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "run a scenario and write its outputs"),
        ("validate", "check a configuration without running it"),
        ("kernels", "tabulate the string memory kernel"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="TOML configuration file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    outdir = None
    try:
        cfg = load_config(args.config)
        if args.command == "kernels" and cfg["scenario"] != "string_kernels":
            raise ConfigError("the kernels command needs scenario = 'string_kernels'")
        if args.command == "validate":
            print(json.dumps({"valid": True, "scenario": cfg["scenario"]}, sort_keys=True))
            return EXIT_OK
        outdir = output_directory(cfg)
        execute(cfg)
        return EXIT_OK
    except ConfigError as exc:
        _report(_error_record(EXIT_CONFIG, exc), None)
        return EXIT_CONFIG
    except NonUniqueSwitchError as exc:
        _report(_error_record(EXIT_NONUNIQUE, exc, _nonunique_extra(exc, outdir)), outdir)
        return EXIT_NONUNIQUE
    except OSError as exc:
        _report(_error_record(EXIT_IO, exc), None)
        return EXIT_IO
    except Exception as exc:  # numerical failures of any kind
        _report(_error_record(EXIT_NUMERICAL, exc), outdir)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
