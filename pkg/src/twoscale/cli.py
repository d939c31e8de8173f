"""Configuration-driven command line for the slow-fast toolkit.

Subcommands tie presets, solvers, rate evaluation, and validation
experiments together with reproducible file outputs:

  simulate    coupled trajectories: slow path and occupation CSVs
  stationary  invariant density of the frozen fast problem
  cell        correctors and effective mobility at one frozen state
  rate        closed-form rate of a supplied (path, flow) pair
  zero-cost   the averaged path with its invariant flow, written as an
              artifact the rate subcommand can read back
  verify      decay / occupation-LLN / growth-rate experiments
  selftest    the full acceptance suite, one line per criterion

Configs are INI text ([section] blocks of key = value lines) with a
versioned schema.  Every key has a default in the SCHEMA table below;
unknown sections or keys are rejected.  --set section.key=value applies
single overrides on top of the config file.  Every run writes
manifest.json (config echo, library versions, seed, wall time) next to
its outputs.  Exit codes: 0 success, 1 failed checks, 2 configuration
errors, 3 numerical failures (with diagnostics.json).
"""

import argparse
import configparser
import csv
import json
import pathlib
import platform
import sys
import time
import traceback

import numpy as np
import scipy

from . import __version__
from .flows import DensityFlow, gaussian_slices
from .grids import box_grid
from .model import PRESETS, check_conditions, derive, preset
from .paths import Path
from .poisson import solve_cell
from .rate import rate_closed_form
from .selftest import run_all
from .simulate import SimConfig, occupation_to_csv, path_to_csv, simulate_path
from .stationary import NumericalError, invariant_density_grid, zero_cost_path
from .verify import (EventSpec, decay_to_csv, estimate_H, h_variational,
                     mc_decay, occupation_lln_ladder)

SCHEMA_VERSION = 1

# Every key the configuration accepts: section -> key -> (default, kind,
# help).  Kinds: int, float, floats (comma list), ints, str, bool;
# a trailing '?' allows the empty string, parsed as None.
SCHEMA = {
    "run": {
        "schema": ("1", "int", "config schema version; must equal 1"),
        "preset": ("ou", "str", "coefficient preset name"),
        "rho": ("", "float?", "noise correlation, ou_rho preset only"),
        "seed": ("0", "int", "master seed"),
        "out": ("twoscale-out", "str", "output directory"),
    },
    "grid": {
        "lo": ("-8.0", "float", "box lower edge, every fast axis"),
        "hi": ("8.0", "float", "box upper edge"),
        "cells": ("400", "int", "cells per axis"),
    },
    "sim": {
        "eps": ("0.1", "float", "time-scale separation"),
        "dt_slow": ("0.01", "float", "slow integrator step"),
        "substeps": ("20", "int", "fast substeps per slow step"),
        "horizon": ("1.0", "float", "final time"),
        "replicas": ("1", "int", "independent realizations"),
        "x0": ("0.0", "floats", "slow initial state"),
        "x0_fast": ("0.0", "floats", "fast initial state"),
    },
    "stationary": {
        "u": ("0.0", "floats", "frozen slow state"),
    },
    "cell": {
        "u": ("0.0", "floats", "frozen slow state"),
        "flow": ("invariant", "str", "weight density: invariant|gaussian"),
        "mean": ("0.0", "floats", "gaussian weight mean"),
        "variance": ("1.0", "floats", "gaussian weight variance"),
    },
    "rate": {
        "times": ("21", "int", "time slices on [0, horizon]"),
        "horizon": ("1.0", "float", "pair horizon"),
        "x0": ("0.7", "floats", "zero-cost start when no artifact given"),
        "path_csv": ("", "str?", "slow path artifact; empty = zero-cost"),
        "flow_csv": ("", "str?", "flow artifact; empty = invariant flow"),
    },
    "zero-cost": {
        "x0": ("0.7", "floats", "slow initial state"),
        "times": ("21", "int", "time slices on [0, horizon]"),
        "horizon": ("1.0", "float", "pair horizon"),
    },
    "verify": {
        "experiment": ("decay", "str", "decay|lln|growth"),
        "event": ("endpoint-halfspace", "str",
                  "decay event: endpoint-halfspace|occupation-ball"),
        "direction": ("1.0", "floats", "halfspace direction"),
        "threshold": ("0.8", "float", "halfspace threshold"),
        "radius": ("0.2", "float", "occupation-ball radius"),
        "target_mean": ("", "floats?",
                        "gaussian occupation-ball target; empty = invariant"),
        "target_variance": ("1.0", "floats", "target variance"),
        "eps_ladder": ("0.2,0.1,0.05", "floats", "decreasing epsilons"),
        "replicas": ("1000", "int", "replicas per rung"),
        "tilted": ("true", "bool", "drive with the minimizing control"),
        "n_nodes": ("9", "int", "path nodes of the minimizer"),
        "flow_family": ("invariant", "str",
                        "minimizer flow family: invariant|gaussian-mean|gaussian"),
        "x0": ("0.0", "floats", "slow initial state"),
        "seeds": ("12,13,14", "ints", "seeds pooled by the lln ladder"),
        "lambdas": ("0.5,1.0", "floats", "growth-rate tilts"),
        "u": ("0.4", "floats", "frozen slow state for growth rates"),
        "t_long": ("200.0", "float", "growth-rate horizon"),
        "h_replicas": ("1500", "int", "growth-rate replicas"),
    },
    "selftest": {
        "criteria": ("", "ints?", "criterion numbers; empty = all"),
    },
}


class ConfigError(Exception):
    """Configuration text violates the schema."""


# ---------------------------------------------------------------------------
# configuration loading


def _parse_value(raw, kind, where):
    optional = kind.endswith("?")
    if optional:
        kind = kind[:-1]
        if raw.strip() == "":
            return None
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return [float(p) for p in raw.split(",") if p.strip() != ""]
        if kind == "ints":
            return [int(p) for p in raw.split(",") if p.strip() != ""]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    raise ConfigError(f"{where}: unknown kind {kind!r}")


def load_config(config_path=None, sets=(), seed=None, out=None) -> dict:
    """Defaults, then the config file, then --set pairs, then flags."""
    text = {sec: {k: spec[0] for k, spec in keys.items()}
            for sec, keys in SCHEMA.items()}
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}")
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                text[sec][key] = raw
    for item in sets:
        head, eq, raw = item.partition("=")
        sec, dot, key = head.partition(".")
        if not eq or not dot:
            raise ConfigError(f"--set wants section.key=value, got {item!r}")
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"--set names unknown key {sec}.{key}")
        text[sec][key] = raw
    if seed is not None:
        text["run"]["seed"] = str(seed)
    if out is not None:
        text["run"]["out"] = out
    cfg = {sec: {k: _parse_value(raw, SCHEMA[sec][k][1], f"[{sec}] {k}")
                 for k, raw in keys.items()}
           for sec, keys in text.items()}
    if cfg["run"]["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"schema version {cfg['run']['schema']} not "
                          f"supported; this build reads version {SCHEMA_VERSION}")
    name = cfg["run"]["preset"]
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset {name!r}; available presets: {known}")
    if cfg["run"]["rho"] is not None and name != "ou_rho":
        raise ConfigError("rho is a parameter of the ou_rho preset only")
    return cfg


def _build_coeffs(cfg):
    name = cfg["run"]["preset"]
    if name == "ou_rho" and cfg["run"]["rho"] is not None:
        return preset(name, rho=cfg["run"]["rho"])
    return preset(name)


def _build_grid(cfg, dim):
    g = cfg["grid"]
    if dim == 1:
        return box_grid(g["lo"], g["hi"], g["cells"])
    return box_grid([g["lo"]] * dim, [g["hi"]] * dim, [g["cells"]] * dim)


def _state(values, dim, where):
    arr = np.asarray(values, dtype=float)
    if arr.size == 1:
        arr = np.full(dim, float(arr.reshape(-1)[0]))
    if arr.shape != (dim,):
        raise ConfigError(f"{where} must have {dim} components")
    return arr


# ---------------------------------------------------------------------------
# artifact readers and writers


def _flow_to_csv(flow: DensityFlow, fname):
    pts = flow.grid.points()
    with open(fname, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t"] + [f"x_{d + 1}" for d in range(flow.grid.dim)]
                    + ["m"])
        for j, t in enumerate(flow.times):
            vals = np.asarray(flow.slices[j]).ravel()
            for p, v in zip(pts, vals):
                wr.writerow([repr(float(t))] + [repr(float(c)) for c in p]
                            + [repr(float(v))])


def _flow_from_csv(fname, grid) -> DensityFlow:
    try:
        data = np.loadtxt(fname, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read flow artifact: {exc}")
    n_cells = grid.points().shape[0]
    if data.shape[0] % n_cells != 0 or data.shape[1] != grid.dim + 2:
        raise ConfigError("flow artifact does not match the configured grid")
    n_slices = data.shape[0] // n_cells
    times = data[::n_cells, 0]
    coords = data[:n_cells, 1:-1]
    if not np.allclose(coords, grid.points(), atol=1e-9):
        raise ConfigError("flow artifact cell centers differ from the grid")
    slices = [data[j * n_cells:(j + 1) * n_cells, -1].reshape(grid.shape)
              for j in range(n_slices)]
    return DensityFlow(times, slices, grid)


def _path_from_csv(fname, n) -> Path:
    try:
        data = np.loadtxt(fname, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read path artifact: {exc}")
    if data.shape[1] != n + 1:
        raise ConfigError(f"path artifact wants {n + 1} columns (t, X)")
    return Path(data[:, 0], data[:, 1:])


def _write_json(payload, fname):
    with open(fname, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(fname, header, rows):
    with open(fname, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    s = cfg["sim"]
    base = dict(eps=s["eps"], dt_slow=s["dt_slow"], substeps=s["substeps"],
                horizon=s["horizon"],
                x0_slow=_state(s["x0"], coeffs.dims.n, "[sim] x0"),
                x0_fast=_state(s["x0_fast"], coeffs.dims.l, "[sim] x0_fast"))
    seed = cfg["run"]["seed"]
    merged = None
    path_rows = []
    for r in range(s["replicas"]):
        path, occ = simulate_path(coeffs, SimConfig(seed=seed + r, **base),
                                  grid)
        merged = occ if merged is None else merged.merged(occ)
        for t, row in zip(path.times, path.values):
            path_rows.append([float(r), t] + list(row))
    _write_rows(out / "slow_paths.csv",
                ["replica", "t"] + [f"X_{i + 1}" for i in range(coeffs.dims.n)],
                path_rows)
    outputs.append("slow_paths.csv")
    occupation_to_csv(merged, out / "occupation.csv")
    outputs.append("occupation.csv")
    print(f"simulated {s['replicas']} replica(s) to t = {s['horizon']:g} "
          f"at eps = {s['eps']:g}; reflections {merged.reflections}")
    return 0


def cmd_stationary(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    u = _state(cfg["stationary"]["u"], coeffs.dims.n, "[stationary] u")
    dens = invariant_density_grid(coeffs.frozen(0.0, u), grid)
    pts = grid.points()
    _write_rows(out / "stationary.csv",
                [f"x_{d + 1}" for d in range(grid.dim)] + ["m"],
                [list(p) + [v] for p, v in
                 zip(pts, np.asarray(dens.values).ravel())])
    outputs.append("stationary.csv")
    with open(out / "conditions.json", "w", encoding="utf-8") as fh:
        fh.write(check_conditions(coeffs).to_json())
        fh.write("\n")
    outputs.append("conditions.json")
    print(f"stationary density: residual {dens.residual:.2e} in "
          f"{dens.iterations} iteration(s), min value {dens.min_value:.2e}")
    return 0


def cmd_cell(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    c = cfg["cell"]
    u = _state(c["u"], coeffs.dims.n, "[cell] u")
    frozen = coeffs.frozen(0.0, u)
    if c["flow"] == "invariant":
        m = invariant_density_grid(frozen, grid).values
    elif c["flow"] == "gaussian":
        m, _ = gaussian_slices(grid,
                               _state(c["mean"], grid.dim, "[cell] mean"),
                               _state(c["variance"], grid.dim,
                                      "[cell] variance"))
    else:
        raise ConfigError("[cell] flow must be invariant or gaussian")
    sol = solve_cell(frozen, m, grid)
    for d in range(grid.dim):
        fp = grid.face_points(d)
        phi = np.asarray(sol.phi.comps[d]).reshape(fp.shape[0], -1)
        psi = np.asarray(sol.psi.comps[d]).reshape(fp.shape[0], -1)
        name = f"cell_faces_axis{d + 1}.csv"
        _write_rows(out / name,
                    [f"x_{i + 1}" for i in range(grid.dim)]
                    + ["phi"] + [f"psi_{i + 1}" for i in range(coeffs.dims.n)],
                    [list(p) + list(a) + list(b)
                     for p, a, b in zip(fp, phi, psi)])
        outputs.append(name)
    _write_json({"q": np.asarray(sol.q).tolist(),
                 "diagnostics": {k: float(v) for k, v in
                                 sol.diagnostics.items()}},
                out / "cell_q.json")
    outputs.append("cell_q.json")
    print(f"effective mobility {np.asarray(sol.q).tolist()}")
    return 0


def _rate_pair(cfg, coeffs, grid):
    r = cfg["rate"]
    times = np.linspace(0.0, r["horizon"], r["times"])
    if r["path_csv"] is None and r["flow_csv"] is None:
        pair = zero_cost_path(
            coeffs, _state(r["x0"], coeffs.dims.n, "[rate] x0"), times, grid)
        return pair.path, pair.flow
    if r["path_csv"] is None:
        raise ConfigError("[rate] flow_csv without path_csv")
    X = _path_from_csv(r["path_csv"], coeffs.dims.n)
    if r["flow_csv"] is not None:
        flow = _flow_from_csv(r["flow_csv"], grid)
        if len(flow.times) != len(X.times) or not np.allclose(
                flow.times, X.times, atol=1e-12):
            raise ConfigError("path and flow artifacts disagree on times")
        return X, flow
    derived = derive(coeffs)
    slices = []
    cached = None
    for t, u in zip(X.times, X.values):
        if cached is None or coeffs.fast_u_dependent or coeffs.time_dependent:
            cached = invariant_density_grid(
                coeffs.frozen(t, u, derived), grid).values
        slices.append(cached)
    return X, DensityFlow(X.times, slices, grid)


def cmd_rate(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    X, flow = _rate_pair(cfg, coeffs, grid)
    bd = rate_closed_form(coeffs, X, flow)
    _write_json(bd.as_json_dict(), out / "rate.json")
    outputs.append("rate.json")
    lam = np.atleast_2d(bd.lambda_hat)
    _write_rows(out / "lambda_hat.csv",
                ["t"] + [f"lambda_{i + 1}" for i in range(lam.shape[1])],
                [[t] + list(row) for t, row in zip(bd.times, lam)])
    outputs.append("lambda_hat.csv")
    print(f"rate total {bd.total:.6e} = fast {bd.fast_part:.6e} "
          f"+ slow {bd.slow_part:.6e}")
    return 0


def cmd_zero_cost(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    z = cfg["zero-cost"]
    times = np.linspace(0.0, z["horizon"], z["times"])
    pair = zero_cost_path(
        coeffs, _state(z["x0"], coeffs.dims.n, "[zero-cost] x0"), times, grid)
    path_to_csv(pair.path, out / "zero_cost_path.csv")
    outputs.append("zero_cost_path.csv")
    _flow_to_csv(pair.flow, out / "zero_cost_flow.csv")
    outputs.append("zero_cost_flow.csv")
    total = rate_closed_form(coeffs, pair.path, pair.flow).total
    _write_json({"converged": pair.converged, "iterations": pair.iterations,
                 "residuals": [float(v) for v in pair.residuals],
                 "rate_total": total}, out / "zero_cost.json")
    outputs.append("zero_cost.json")
    print(f"zero-cost pair: {pair.iterations} iteration(s), residual "
          f"{pair.residuals[-1]:.2e}, rate {total:.2e}")
    return 0


def _verify_event(cfg, coeffs, grid):
    v = cfg["verify"]
    if v["event"] == "endpoint-halfspace":
        return EventSpec(kind="endpoint-halfspace",
                         direction=v["direction"], threshold=v["threshold"])
    if v["event"] == "occupation-ball":
        if v["target_mean"] is not None:
            target, _ = gaussian_slices(
                grid, _state(v["target_mean"], grid.dim,
                             "[verify] target_mean"),
                _state(v["target_variance"], grid.dim,
                       "[verify] target_variance"))
        else:
            u = _state(v["x0"], coeffs.dims.n, "[verify] x0")
            target = invariant_density_grid(coeffs.frozen(0.0, u),
                                            grid).values
        return EventSpec(kind="occupation-ball", target=target,
                         radius=v["radius"])
    raise ConfigError("[verify] event must be endpoint-halfspace or "
                      "occupation-ball")


def cmd_verify(cfg, out, outputs):
    coeffs = _build_coeffs(cfg)
    grid = _build_grid(cfg, coeffs.dims.l)
    v = cfg["verify"]
    seed = cfg["run"]["seed"]
    if v["experiment"] == "decay":
        event = _verify_event(cfg, coeffs, grid)
        est = mc_decay(coeffs, event, v["eps_ladder"], v["replicas"],
                       seed=seed, tilted=v["tilted"],
                       dt_slow=cfg["sim"]["dt_slow"], grid=grid,
                       x0=_state(v["x0"], coeffs.dims.n, "[verify] x0"),
                       n_nodes=v["n_nodes"], flow_family=v["flow_family"])
        decay_to_csv(est, out / "decay.csv")
        outputs.append("decay.csv")
        _write_json(est.as_json_dict(), out / "decay.json")
        outputs.append("decay.json")
        if np.isfinite(est.slope):
            print(f"decay slope {est.slope:.4f}, "
                  f"reference {-est.reference:.4f}")
        else:
            print("decay slope undefined: no rung had any hits; raise "
                  "replicas or the ladder")
        return 0
    if v["experiment"] == "lln":
        ladder = occupation_lln_ladder(coeffs, v["eps_ladder"],
                                       seeds=tuple(v["seeds"]),
                                       dt_slow=cfg["sim"]["dt_slow"],
                                       grid=grid)
        _write_rows(out / "lln.csv", ["eps", "l1_distance"],
                    list(zip(v["eps_ladder"], ladder)))
        outputs.append("lln.csv")
        print("occupation LLN L1: "
              + " ".join(f"{e:g}:{d:.4f}"
                         for e, d in zip(v["eps_ladder"], ladder)))
        return 0
    if v["experiment"] == "growth":
        u = _state(v["u"], coeffs.dims.n, "[verify] u")
        rows = []
        worst = 0.0
        for lam in v["lambdas"]:
            lam_vec = np.full(coeffs.dims.n, lam)
            hv, _ = h_variational(coeffs, u, lam_vec, grid)
            hm = estimate_H(coeffs, u, lam_vec, T_long=v["t_long"],
                            replicas=v["h_replicas"], seed=seed, grid=grid)
            rel = abs(hm - hv) / max(abs(hv), 1e-12)
            worst = max(worst, rel)
            rows.append([lam, hm, hv, rel])
        _write_rows(out / "growth.csv",
                    ["lambda", "mc_value", "variational_value", "rel_gap"],
                    rows)
        outputs.append("growth.csv")
        print(f"growth rates: worst relative gap {worst:.2e}")
        return 0
    raise ConfigError("[verify] experiment must be decay, lln, or growth")


def cmd_selftest(cfg, out, outputs):
    numbers = cfg["selftest"]["criteria"]
    results = run_all(set(numbers) if numbers else None)
    _write_json({"results": [{"number": r.number, "label": r.label,
                              "passed": r.passed, "detail": r.detail,
                              "runtime_s": r.runtime} for r in results],
                 "all_passed": all(r.passed for r in results)},
                out / "selftest.json")
    outputs.append("selftest.json")
    return 0 if results and all(r.passed for r in results) else 1


HANDLERS = {
    "simulate": cmd_simulate,
    "stationary": cmd_stationary,
    "cell": cmd_cell,
    "rate": cmd_rate,
    "zero-cost": cmd_zero_cost,
    "verify": cmd_verify,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twoscale",
        description="simulation and rate evaluation for coupled "
                    "slow-fast diffusions")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", metavar="PATH",
                       help="INI configuration file")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override [run] seed")
        p.add_argument("--out", metavar="DIR", help="override [run] out")
        p.add_argument("--set", action="append", default=[],
                       metavar="SEC.KEY=VAL", dest="sets",
                       help="override one config value (repeatable)")
    return parser


def _manifest(cfg, subcommand, wall, outputs):
    return {
        "schema": SCHEMA_VERSION,
        "subcommand": subcommand,
        "seed": cfg["run"]["seed"],
        "config": cfg,
        "versions": {"twoscale": __version__,
                     "python": platform.python_version(),
                     "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "wall_time_s": wall,
        "outputs": outputs,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.sets, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = pathlib.Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    started = time.perf_counter()
    try:
        code = HANDLERS[args.subcommand](cfg, out, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # domain objects validate their parameters; a rejected value is a
        # configuration problem, not a numerical one
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc),
                "traceback": traceback.format_exc(), "config": cfg}
        _write_json(diag, out / "diagnostics.json")
        print(f"numerical failure: {exc}\ndiagnostics written to "
              f"{out / 'diagnostics.json'}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - started
    _write_json(_manifest(cfg, args.subcommand, wall, outputs),
                out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
