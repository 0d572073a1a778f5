"""Command-line entry point: simulate, diagnose, budget, shear-test, burgers, fit.

Configuration files hold one `key = value` pair per line; `#` starts a
comment.  Unknown keys and out-of-range values are rejected before any
computation.  Every output embeds the effective configuration.

Exit codes: 0 success, 2 invalid configuration or inputs, 3 the run
diverged or broke the CFL limit, 4 snapshots lack pressure.
"""

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as dg
from .checkpoint import CheckpointError, load_snapshot, read_header, save_checkpoint, save_snapshot
from .integrator import (
    DivergenceError, SimConfig, StepSizeError, balance_report, burgers_run,
    degenerate_shear_run, run, stationarity_check,
)
from .spectral import ConfigurationError, assumption_monitors, make_cutoff, pressure_recover, set_workers

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NO_PRESSURE = 4


class ConfigError(ValueError):
    """Invalid configuration file or command-line input."""


def _positive(x):
    return x > 0


def _nonnegative(x):
    return x >= 0


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


# key: (parser, default, check, description)
SCHEMA = {
    "nu": (float, None, _positive, "viscosity"),
    "N": (int, 32, lambda n: n >= 4, "grid points per direction"),
    "dimension": (int, 3, lambda d: d in (1, 3), "1 (Burgers) or 3"),
    "dt": (float, 0.01, _positive, "time step"),
    "shell_lo": (float, 1.0, lambda k: k >= 1, "forcing shell inner radius"),
    "shell_hi": (float, 2.0, lambda k: k >= 1, "forcing shell outer radius"),
    "epsilon": (float, 1.0, _nonnegative, "noise trace"),
    "c": (float, 1.0, _positive, "OU drift scale, lambda_k = c |k|^2"),
    "seed": (int, 0, _nonnegative, "random seed (TURBKIT_SEED overrides)"),
    "t_burnin": (float, 0.0, _nonnegative, "discarded spin-up time"),
    "t_sample": (float, 0.0, _nonnegative, "sampling time"),
    "snapshot_stride": (int, 10, lambda n: n >= 1, "steps between snapshots"),
    "cfl_max": (float, 1.0, _positive, "CFL limit"),
    "init_energy": (float, 0.0, _nonnegative, "initial ||u||^2"),
    "psi_kind": (str, "bump", lambda s: s in ("bump", "uniform"), "bump or uniform"),
    "psi_center": (_floats, (np.pi, np.pi, np.pi), lambda c: len(c) in (1, 3), "bump center"),
    "psi_radius": (float, 2.5, lambda r: 0 < r < np.pi, "bump radius"),
    "n_dirs": (int, 0, lambda n: n == 0 or n >= 16, "0 for exact sphere averages"),
    "ell_min": (float, 0.05, _positive, "smallest increment length"),
    "ell_max": (float, 2.5, _positive, "largest increment length"),
    "n_ell": (int, 24, lambda n: n >= 2, "number of lengths"),
    "ell_spacing": (str, "log", lambda s: s in ("log", "linear"), "log or linear"),
    "n_gauss": (int, 8, lambda n: n >= 2, "Gauss points per length interval"),
    "fit_lo": (float, None, _positive, "scaling window lower end"),
    "fit_hi": (float, None, _positive, "scaling window upper end"),
    "out": (str, None, lambda s: bool(s), "output directory"),
}


def parse_config(text):
    """Parse `key = value` lines against SCHEMA; returns only the given keys."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        parser, _, check, desc = SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError:
            raise ConfigError(f"line {n}: cannot parse {key} = {value!r}") from None
        if not check(parsed):
            raise ConfigError(f"line {n}: {key} = {value!r} out of range ({desc})")
        out[key] = parsed
    return out


def load_config(path):
    """Effective configuration: defaults, then the file, then TURBKIT_SEED."""
    cfg = {k: v[1] for k, v in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config(text))
    env = os.environ.get("TURBKIT_SEED")
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"TURBKIT_SEED must be an integer, got {env!r}") from None
        if cfg["seed"] < 0:
            raise ConfigError("TURBKIT_SEED must be nonnegative")
    if cfg["shell_lo"] > cfg["shell_hi"]:
        raise ConfigError("shell_lo exceeds shell_hi")
    if cfg["ell_min"] >= cfg["ell_max"]:
        raise ConfigError("ell_min must be below ell_max")
    return cfg


def sim_config(cfg):
    if cfg["nu"] is None:
        raise ConfigError("nu is required")
    return SimConfig(
        nu=cfg["nu"], N=cfg["N"], dimension=cfg["dimension"], dt=cfg["dt"],
        shell=(cfg["shell_lo"], cfg["shell_hi"]), epsilon=cfg["epsilon"], c=cfg["c"],
        t_burnin=cfg["t_burnin"], t_sample=cfg["t_sample"],
        snapshot_stride=cfg["snapshot_stride"], seed=cfg["seed"], cfl_max=cfg["cfl_max"],
        init_energy=cfg["init_energy"])


def _cutoff(cfg, grid):
    if cfg["psi_kind"] == "uniform":
        return make_cutoff(grid, "uniform")
    center = cfg["psi_center"]
    if len(center) != grid.dimension:
        raise ConfigError(f"psi_center needs {grid.dimension} components")
    return make_cutoff(grid, "bump", center=center, radius=cfg["psi_radius"])


def _length_grid(cfg, margin=np.inf):
    return dg.build_length_grid(cfg["ell_min"], cfg["ell_max"], cfg["n_ell"],
                                cfg["ell_spacing"], margin, cfg["n_gauss"])


def _directions(cfg):
    return None if cfg["n_dirs"] == 0 else dg.build_direction_set(cfg["n_dirs"])


# ---------------------------------------------------------------- output

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path, payload):
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_csv(path, columns, cfg, extra=None):
    """Columns of equal length, config echoed as `# key = value` lines."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names]) \
        if names else np.zeros((0, 0))
    lines = [f"# turbkit {__version__}"]
    for key, value in cfg.items():
        lines.append(f"# {key} = {_format_value(value)}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key} = {_format_value(value)}")
    lines.append(",".join(names))
    for row in data:
        lines.append(",".join("%.17g" % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def read_csv(path):
    """Columns and `# key = value` metadata of a file written by write_csv."""
    meta = {}
    header = None
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if "=" in line:
                key, value = (s.strip() for s in line[1:].split("=", 1))
                meta[key] = value
            continue
        if header is None:
            header = line.split(",")
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise ConfigError(f"{path}: no column header")
    data = np.asarray(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}, meta


def metadata(cfg, command, wall_time, **extra):
    out = {
        "config": cfg, "command": command, "version": __version__,
        "wall_time_s": wall_time, "python": platform.python_version(),
        "numpy": np.__version__, "seed": cfg.get("seed"),
    }
    out.update(extra)
    return out


def _out_dir(args, cfg):
    out = args.out or cfg.get("out")
    if out is None:
        raise ConfigError("no output directory (use --out or the 'out' key)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- snapshots

def snapshot_files(directory):
    d = Path(directory)
    if d.is_dir() and (d / "snapshots").is_dir():
        d = d / "snapshots"
    files = sorted(d.glob("*.tksc"))
    if not files:
        raise ConfigError(f"no snapshot files in {directory}")
    return files


def _check_snapshot_grids(files):
    headers = []
    for f in files:
        try:
            headers.append(read_header(f))
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from None
    grids = {(h["dimension"], h["N"]) for h in headers}
    if len(grids) > 1:
        raise ConfigError(f"snapshots live on different grids: {sorted(grids)}")
    return headers


def iter_snapshots(files):
    for f in files:
        yield load_snapshot(f)


def _viscosity(cfg, headers):
    if cfg["nu"] is not None:
        return cfg["nu"]
    nu = headers[0]["nu"]
    if not nu > 0:
        raise ConfigError("viscosity unknown: set nu in the config")
    return nu


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    cfg = load_config(args.config)
    sc = sim_config(cfg)
    out = _out_dir(args, cfg)
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    stream = run(sc)
    count = 0
    for snap in stream:
        count += 1
        save_snapshot(snap, snaps / f"snap_{snap.step:09d}.tksc", sc.nu)
    save_checkpoint(stream.state, out / "final.tksc")
    series = stream.series
    write_csv(out / "series.csv", series.arrays(), cfg)
    summary = {}
    if count and stream.sample_start is not None:
        summary = {"balance": balance_report(series, stream.sample_start, sc.nu),
                   "stationarity": stationarity_check(series, stream.sample_start)}
    write_json(out / "metadata.json", metadata(
        cfg, "simulate", time.perf_counter() - t0, snapshots=count,
        noise=sc.spectrum().describe(), final_time=stream.state.t, **summary))
    print(f"wrote {count} snapshots to {snaps}")
    return 0


def cmd_diagnose(args):
    cfg = load_config(args.config)
    files = snapshot_files(args.snapshots)
    headers = _check_snapshot_grids(files)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    first = load_snapshot(files[0])
    grid = first.u.grid
    nu = cfg["nu"] if cfg["nu"] is not None else (headers[0]["nu"] or None)
    psi = _cutoff(cfg, grid) if grid.dimension == 3 else None
    lgrid = _length_grid(cfg, psi.shift_margin if psi is not None else np.inf)
    snaps = list(iter_snapshots(files))
    profile = dg.structure_functions(snaps, psi, lgrid, _directions(cfg), nu)
    columns = {"ell": lgrid.ell, "s0": profile.S0, "s0_stderr": profile.S0_stderr,
               "spar": profile.Spar, "spar_stderr": profile.Spar_stderr}
    extra = {"count": profile.count, "stderr_available": profile.available,
             "local_dissipation": profile.local_dissipation}
    write_csv(out / "sf.csv", columns, cfg, extra)

    monitors = {"count": len(snaps), "stderr_available": profile.available}
    if nu is not None:
        monitors["wad"] = dg.wad_monitor(snaps, nu)
        monitors["local_dissipation"] = profile.local_dissipation
        monitors["local_dissipation_stderr"] = profile.local_dissipation_stderr
    if grid.dimension == 3:
        probes = [np.eye(3)[i] * ell for ell in lgrid.ell[::max(1, len(lgrid) // 4)] for i in range(3)]
        recs = [assumption_monitors(s.u, s.p if s.p is not None else pressure_recover(s.u), probes)
                for s in snaps]
        monitors["assumptions"] = {k: float(np.mean([getattr(r, k) for r in recs]))
                                   for k in ("u_l3", "du_l3_max", "p_l32", "dp_l32_max")}
    write_json(out / "monitors.json", metadata(cfg, "diagnose", time.perf_counter() - t0,
                                               monitors=monitors, snapshots=[str(f) for f in files]))
    print(f"wrote {out / 'sf.csv'} and {out / 'monitors.json'}")
    return 0


def cmd_budget(args):
    cfg = load_config(args.config)
    files = snapshot_files(args.snapshots)
    headers = _check_snapshot_grids(files)
    nu = _viscosity(cfg, headers)
    if headers[0]["dimension"] != 3:
        raise ConfigError("budgets need three-dimensional snapshots")
    if not args.recover_pressure and not all(h["has_pressure"] for h in headers):
        raise dg.MissingPressureError()
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    grid = load_snapshot(files[0]).u.grid
    psi = _cutoff(cfg, grid)
    lgrid = _length_grid(cfg, psi.shift_margin)
    law = {"43": "four_thirds", "45": "four_fifths"}[args.law]
    an = dg.analyze(iter_snapshots(files), psi, lgrid, nu, _directions(cfg), laws=(law,),
                    recover_pressure=args.recover_pressure)
    budget = an.budgets[law]
    columns = {"ell": lgrid.ell, "s0": an.profile.S0, "spar": an.profile.Spar}
    for name, col in budget.columns().items():
        if name != "ell":
            columns[name] = col
    for name in budget.terms:
        columns[f"{name}_stderr"] = budget.stderr[name]
    columns["relative_residual"] = budget.relative_residual()
    write_csv(out / f"budget_{args.law}.csv", columns, cfg,
              {"law": law, "nu": nu, "count": budget.count})
    summary = {
        "law": law, "nu": nu, "count": budget.count, "limits": budget.limits,
        "max_relative_residual": float(np.max(budget.relative_residual())),
        "max_residual_over_stderr": float(np.max(np.abs(budget.residual) / budget.stderr["residual"])),
        "lee": an.lee.__dict__, "wad": an.wad,
    }
    write_json(out / f"budget_{args.law}.json", metadata(cfg, "budget", time.perf_counter() - t0,
                                                         summary=summary))
    print(f"wrote {out / f'budget_{args.law}.csv'}")
    return 0


def cmd_shear_test(args):
    rng = np.random.default_rng(int(os.environ.get("TURBKIT_SEED", args.seed)))
    rows = []
    print(f"{'nu':>10} {'measured':>12} {'1/(nu+1)':>12} {'rel_err':>10}")
    for nu in args.nu:
        if not nu > 0:
            raise ConfigError(f"nu must be positive, got {nu}")
        measured = degenerate_shear_run(nu, args.t_final, args.dt, rng)
        target = 1.0 / (nu + 1.0)
        rel = abs(measured - target) / target
        rows.append({"nu": nu, "measured": measured, "target": target, "relative_error": rel})
        print(f"{nu:>10.4g} {measured:>12.6g} {target:>12.6g} {rel:>10.3%}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "shear_test.json", {"rows": rows, "t_final": args.t_final, "dt": args.dt,
                                             "version": __version__})
    return 0


def cmd_burgers(args):
    cfg = load_config(args.config)
    cfg["dimension"] = 1
    sc = sim_config(cfg)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    stream = burgers_run(sc)
    snaps = stream.drain()
    if not snaps:
        raise ConfigError("burgers run produced no snapshots (t_sample too short)")
    lgrid = _length_grid(cfg)
    profile = dg.structure_functions(snaps, None, lgrid, nu=sc.nu)
    window = dg.linear_scaling_range(lgrid.ell, profile.S0)
    write_csv(out / "sf.csv", {"ell": lgrid.ell, "s3": profile.S0, "s3_stderr": profile.S0_stderr},
              cfg, {"local_dissipation": profile.local_dissipation})
    write_csv(out / "series.csv", stream.series.arrays(), cfg)
    write_json(out / "metadata.json", metadata(
        cfg, "burgers", time.perf_counter() - t0, snapshots=len(snaps),
        balance=balance_report(stream.series, stream.sample_start, sc.nu),
        linear_range=window))
    print(f"wrote {out / 'sf.csv'}")
    return 0


def cmd_fit(args):
    columns, meta = read_csv(args.profile)
    ell = columns["ell"]
    s0 = columns.get("s0", columns.get("s3"))
    spar = columns.get("spar", s0)
    if s0 is None:
        raise ConfigError(f"{args.profile}: no s0 or s3 column")
    diss = meta.get("local_dissipation")
    diss = float(diss) if diss not in (None, "None") else None
    profile = dg.SFProfile(dg.LengthGrid(ell), s0, spar, np.zeros_like(ell), np.zeros_like(ell),
                           1, True, diss)
    fit = dg.scaling_fit(profile, tuple(args.window))
    payload = {"window": list(args.window), "profile": str(args.profile), **fit.__dict__}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "fit.json", payload)
    print(json.dumps(_jsonable(payload), indent=2))
    return 0


# ---------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(prog="turbkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"turbkit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="FFT worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded transforms for bitwise reproducible output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the forced solver")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", parents=[common], help="structure functions and monitors")
    p.add_argument("snapshots", help="snapshot directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("budget", parents=[common], help="integrated 4/3 or 4/5 budget")
    p.add_argument("snapshots", help="snapshot directory")
    p.add_argument("--law", choices=("43", "45"), default="43")
    p.add_argument("--recover-pressure", action="store_true",
                   help="compute the pressure of snapshots that lack it")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("shear-test", parents=[common], help="degenerate shear testbed")
    p.add_argument("--nu", type=float, nargs="+", default=[1.0, 0.5, 0.1])
    p.add_argument("--t-final", type=float, default=2e5)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shear_test)

    p = sub.add_parser("burgers", parents=[common], help="stochastic Burgers analogue")
    p.set_defaults(func=cmd_burgers)

    p = sub.add_parser("fit", parents=[common], help="fit 4/3 and 4/5 slopes to a profile")
    p.add_argument("profile", help="sf.csv written by diagnose or burgers")
    p.add_argument("--window", type=float, nargs=2, required=True, metavar=("LO", "HI"))
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        set_workers(args.threads)
    if args.deterministic:
        set_workers(1)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepSizeError, DivergenceError) as exc:
        print(f"error: run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except dg.MissingPressureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PRESSURE


if __name__ == "__main__":
    sys.exit(main())
