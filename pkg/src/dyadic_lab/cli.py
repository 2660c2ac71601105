"""Command-line front end.

Every subcommand that writes files also writes ``manifest.json`` holding the
command, the fully resolved configuration and sha256 checksums, and
``--config manifest.json`` re-runs it.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, ctmc, crossval
from . import moments as mom
from .crossval import Table
from .model import Boundary, ModelParams, RangeError, TruncationSpec, stationary_second_moments
from .sde import InitialLaw, SchemeKind, SchemeSpec, default_dt, run_ensemble
from .stats import wilson_interval

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_RANGE = 0, 1, 2, 3


class UsageError(Exception):
    """Bad or missing command-line input."""


# ----------------------------------------------------------------------------
# vector specs


def parse_vector(spec, n_modes, params, what="vector"):
    """Deterministic vector from ``e<k>``, ``zero``, ``stationary``, ``geom:<a>:<r>`` or ``v1,v2,...``.

    ``stationary`` gives the stationary second moments s_n; callers that
    need a state with those second moments take square roots.
    """
    spec = spec.strip()
    idx = np.arange(1, n_modes + 1)
    try:
        if spec == "zero":
            return np.zeros(n_modes)
        if spec == "stationary":
            return stationary_second_moments(params, n_modes)
        if spec.startswith("e") and spec[1:].isdigit():
            k = int(spec[1:])
            if not 1 <= k <= n_modes:
                raise UsageError(f"{what} {spec!r}: mode {k} outside 1..{n_modes}")
            return np.eye(n_modes)[k - 1]
        if spec.startswith("geom:"):
            _, a, r = spec.split(":")
            return float(a) * float(r) ** idx
        if "," in spec or _is_float(spec):
            values = np.array([float(v) for v in spec.split(",")])
            if values.shape[0] > n_modes:
                raise UsageError(f"{what} has {values.shape[0]} entries, more than n_modes={n_modes}")
            out = np.zeros(n_modes)
            out[: values.shape[0]] = values
            return out
    except ValueError as exc:
        raise UsageError(f"cannot parse {what} {spec!r}: {exc}") from None
    raise UsageError(f"unknown {what} spec {spec!r} (use e<k>, zero, stationary, geom:<a>:<r>, gauss:<spec>)")


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def parse_initial_law(spec, n_modes, params):
    """Initial law for SDE runs; ``gauss:<spec>`` draws independent normals with those variances."""
    if spec.startswith("gauss:"):
        return InitialLaw.gaussian(parse_vector(spec[len("gauss:"):], n_modes, params, "variance spec"))
    if spec.strip() == "stationary":
        return InitialLaw.deterministic(np.sqrt(stationary_second_moments(params, n_modes)))
    return InitialLaw.deterministic(parse_vector(spec, n_modes, params, "--x0"))


# ----------------------------------------------------------------------------
# output


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def emit_series(table, fmt, path):
    """Write ``table`` as CSV (header row) or JSON records; returns the path."""
    path = Path(path)
    try:
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(table.columns)
            for row in table.rows:
                writer.writerow([_fmt(v) for v in row])
            path.write_text(buf.getvalue())
        elif fmt == "json":
            records = [{c: _plain(v) for c, v in zip(table.columns, row)} for row in table.rows]
            path.write_text(json.dumps({"columns": list(table.columns), "records": records}, indent=1) + "\n")
        else:
            raise UsageError(f"unknown output format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _plain(v):
    if isinstance(v, (np.generic,)):
        return v.item()
    return v


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunConfig:
    command: str
    values: dict
    output_dir: str = None
    output_format: str = "csv"
    files: list = field(default_factory=list)

    def write_manifest(self):
        out = Path(self.output_dir)
        manifest = {
            "command": self.command,
            "config": self.values,
            "output_format": self.output_format,
            "package_version": __version__,
            "files": {Path(f).name: _sha256(f) for f in self.files},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_tables(cfg, tables):
    if cfg.output_dir is None:
        return
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    for name, table in tables.items():
        cfg.files.append(emit_series(table, cfg.output_format, out / f"{name}.{cfg.output_format}"))
    cfg.write_manifest()


# ----------------------------------------------------------------------------
# argument handling

# (dest, flag, type, default, help)
_COMMON = [("lam", "--lambda", float, None, "spacing ratio lambda > 1 (required unless in --config)")]
_SPECS = {
    "oracle": _COMMON + [
        ("sigma", "--sigma", float, 1.0, "forcing amplitude"),
        ("n", "--n", int, 2, "number of modes (stationary)"),
        ("i", "--i", int, 1, "start state (occupation, pi)"),
        ("j", "--j", int, 1, "target state (occupation, pi)"),
        ("t", "--t", float, 1.0, "time (survival-bound)"),
    ],
    "simulate-sde": _COMMON + [
        ("sigma", "--sigma", float, 0.0, "forcing amplitude"),
        ("n_modes", "--n-modes", int, 16, "truncation size N"),
        ("boundary", "--boundary", str, "conservative", "conservative or absorbing"),
        ("scheme", "--scheme", str, "cayley_stratonovich", "ito_splitting, cayley_stratonovich or rotation_splitting"),
        ("dt", "--dt", float, None, "step size (default depends on the scheme)"),
        ("t_final", "--t-final", float, 0.25, "final time"),
        ("paths", "--paths", int, 1000, "number of paths"),
        ("seed", "--seed", int, 0, "64-bit seed"),
        ("x0", "--x0", str, "e1", "initial condition spec"),
        ("forcing_order", "--forcing-order", str, "strang", "pre, post or strang"),
        ("refine", "--refine", int, 0, "Brownian refinement levels"),
        ("samples", "--samples", int, 10, "number of sampling intervals"),
    ],
    "solve-moments": _COMMON + [
        ("sigma", "--sigma", float, 0.0, "forcing amplitude"),
        ("n_modes", "--n-modes", int, 16, "truncation size N"),
        ("boundary", "--boundary", str, "absorbing", "conservative or absorbing"),
        ("u0", "--u0", str, "e1", "initial second moments spec"),
        ("t_final", "--t-final", float, 1.0, "final time"),
        ("checkpoints", "--checkpoints", int, 10, "number of equal output intervals"),
    ],
    "simulate-chain": _COMMON + [
        ("start", "--start", int, 1, "start state"),
        ("horizon", "--horizon", float, 1.0, "time horizon (inf allowed)"),
        ("cap", "--cap", int, ctmc.DEFAULT_CAP, "cap state treated as explosion"),
        ("paths", "--paths", int, 10000, "number of paths"),
        ("seed", "--seed", int, 0, "64-bit seed"),
        ("times", "--times", int, 5, "number of survival grid points in (0, horizon]"),
    ],
    "verify": [("seed", "--seed", int, 42, "base seed")],
}
_NEEDS_LAMBDA = {"oracle", "simulate-sde", "solve-moments", "simulate-chain"}


def build_parser():
    parser = argparse.ArgumentParser(prog="dyadic-lab", description="Simulation and verification lab for the "
                                     "linear stochastic dyadic model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, specs in _SPECS.items():
        p = sub.add_parser(name)
        if name == "oracle":
            p.add_argument("kind", choices=["stationary", "occupation", "pi", "survival-bound"])
        if name == "verify":
            p.add_argument("suite", choices=sorted(crossval.SUITES) + ["all"])
        for dest, flag, typ, _, help_ in specs:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
        p.add_argument("--config", help="JSON config or manifest; explicit flags win")
        if name != "oracle":
            p.add_argument("--out", dest="output_dir", default=None, help="output directory")
            p.add_argument("--format", dest="output_format", choices=["csv", "json"], default=None)
    return parser


def _load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {path} is not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError("--config must hold a JSON object")
    if "config" in data and isinstance(data["config"], dict):
        merged = dict(data["config"])
        for key in ("output_format", "command"):
            if key in data:
                merged.setdefault(key, data[key])
        return merged
    return data


def resolve(args):
    """Merge defaults, config file and explicit flags (in increasing priority)."""
    specs = _SPECS[args.command]
    file_values = _load_config(args.config) if args.config else {}
    if "command" in file_values and file_values["command"] != args.command:
        raise UsageError(f"--config was written by {file_values['command']!r}, not {args.command!r}")
    values = {}
    known = {dest for dest, *_ in specs} | {"kind", "suite"}
    for key in file_values:
        if key not in known and key not in ("command", "output_format", "output_dir"):
            raise UsageError(f"--config: unknown key {key!r}")
    for dest, flag, typ, default, _ in specs:
        cli = getattr(args, dest)
        if cli is not None:
            values[dest] = cli
        elif dest in file_values and file_values[dest] is not None:
            try:
                values[dest] = typ(file_values[dest])
            except (TypeError, ValueError):
                raise UsageError(f"--config: bad value for {flag}: {file_values[dest]!r}") from None
        else:
            values[dest] = default
    for key in ("kind", "suite"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if args.command in _NEEDS_LAMBDA and values.get("lam") is None:
        raise UsageError("missing --lambda (give it on the command line or in --config)")
    fmt = getattr(args, "output_format", None) or file_values.get("output_format") or "csv"
    out = getattr(args, "output_dir", None)
    return RunConfig(args.command, values, out, fmt)


# ----------------------------------------------------------------------------
# commands


def _params(v):
    return ModelParams(v["lam"], v.get("sigma") or 0.0)


def cmd_oracle(cfg, stdout):
    v = cfg.values
    params = _params(v)
    kind = v["kind"]
    if kind == "stationary":
        values = stationary_second_moments(params, v["n"])
    elif kind == "occupation":
        values = [ctmc.expected_occupation(v["i"], v["j"], params)]
    elif kind == "pi":
        values = [ctmc.never_visit_probability(v["i"], v["j"], params)]
    else:
        values = [ctmc.survival_upper_bound(v["t"], params), ctmc.survival_threshold(params)]
    for x in values:
        print(_fmt(x), file=stdout)
    return EXIT_OK


def cmd_simulate_sde(cfg, stdout):
    v = cfg.values
    params = _params(v)
    trunc = TruncationSpec(v["n_modes"], Boundary(v["boundary"]))
    kind = SchemeKind(v["scheme"])
    if v["dt"] is None:
        v["dt"] = min(default_dt(kind, params, trunc), v["t_final"])
    scheme = SchemeSpec(kind, v["dt"], v["t_final"], v["forcing_order"], v["refine"])
    law = parse_initial_law(v["x0"], trunc.n_modes, params)
    times = np.linspace(0.0, v["t_final"], v["samples"] + 1)
    stats = run_ensemble(law, params, trunc, scheme, v["paths"], v["seed"], times)
    energy = Table(("time", "mean_energy", "stderr"),
                   list(zip(stats.sample_times, stats.mean_energy, stats.energy_std_errors)))
    _write_tables(cfg, {"ensemble": crossval.ensemble_table(stats), "energy": energy})
    print(f"paths={stats.n_paths} t={stats.sample_times[-1]:g} mean_energy={_fmt(stats.mean_energy[-1])} "
          f"stderr={_fmt(stats.energy_std_errors[-1])} residual_max={_fmt(stats.energy_residual_max)}", file=stdout)
    return EXIT_OK


def cmd_solve_moments(cfg, stdout):
    v = cfg.values
    params = _params(v)
    trunc = TruncationSpec(v["n_modes"], Boundary(v["boundary"]))
    u0 = parse_vector(v["u0"], trunc.n_modes, params, "--u0")
    if v["u0"].strip().startswith("gauss:"):
        raise UsageError("--u0 takes second moments directly; gauss: is for --x0")
    q = mom.build_q_matrix(params, trunc)
    sol = mom.solve_forward(q, u0, params.sigma, v["t_final"], v["checkpoints"])
    _write_tables(cfg, {"moments": crossval.moment_table(sol.times, sol.u)})
    print(f"t={sol.times[-1]:g} sum_u={_fmt(sol.final.sum())} self_check={_fmt(sol.error_estimate)}", file=stdout)
    for n, x in enumerate(sol.final, 1):
        print(f"u_{n} {_fmt(x)}", file=stdout)
    return EXIT_OK


def cmd_simulate_chain(cfg, stdout):
    v = cfg.values
    params = _params(v)
    horizon = v["horizon"]
    if not horizon > 0:
        raise UsageError(f"--horizon must be positive, got {horizon}")
    if math.isinf(horizon):
        grid = []
    else:
        grid = np.linspace(0.0, horizon, v["times"] + 1)[1:].tolist()
    batch = ctmc.run_chains(v["start"], params, v["paths"], v["seed"], v["cap"], horizon=horizon)
    n = batch.n_paths
    surv_rows = []
    for t in grid:
        ci = wilson_interval(int(np.count_nonzero(batch.alive(t))), n)
        bound = ctmc.survival_upper_bound(t, params) if v["start"] == 1 else float("nan")
        surv_rows.append((t, ci.point, ci.low, ci.high, bound))
    occ_rows = []
    for j in range(1, v["cap"]):
        occ = batch.occupation[:, j - 1]
        occ_rows.append((j, occ.mean(), occ.std(ddof=1) / math.sqrt(n), ctmc.expected_occupation(v["start"], j, params),
                         float(np.mean(batch.visits[:, j - 1] == 0))))
    exploded = np.isfinite(batch.explosion_time)
    tables = {"occupation": Table(("j", "mean_T", "stderr", "expected", "never_visit_freq"), occ_rows)}
    if surv_rows:
        tables["survival"] = Table(("t", "point", "ci_low", "ci_high", "upper_bound"), surv_rows)
    _write_tables(cfg, tables)
    msg = f"paths={n} exploded_by_horizon={int(exploded.sum())} mean_jumps={_fmt(batch.n_jumps.mean())}"
    if exploded.all():
        msg += f" mean_explosion_time={_fmt(batch.explosion_time.mean())}"
    print(msg, file=stdout)
    return EXIT_OK


def cmd_verify(cfg, stdout):
    v = cfg.values
    reports = crossval.run_suite(v["suite"], seed=v["seed"])
    width = max(len(m.label) for r in reports for m in r.metrics) + 2
    for r in reports:
        print(f"== {r.name} ({r.elapsed:.1f}s) {'PASS' if r.passed else 'FAIL'}", file=stdout)
        for w in r.warnings:
            print(f"   warning: {w}", file=stdout)
        for m in r.metrics:
            print(f"   {'pass' if m.passed else 'FAIL'}  {m.label:<{width}} value={_fmt(m.value)} "
                  f"ref={_fmt(m.reference)} tol={_fmt(m.tolerance)} [{m.comparison}, {m.provenance}]", file=stdout)
    if cfg.output_dir is not None:
        tables = {}
        for r in reports:
            tables[f"{r.name}_metrics"] = Table(("label", "value", "reference", "tolerance", "comparison",
                                                 "provenance", "status"), [m.as_row() for m in r.metrics])
            for name, t in r.tables.items():
                tables[f"{r.name}_{name}"] = t
        _write_tables(cfg, tables)
    ok = all(r.passed for r in reports)
    print(f"overall: {'PASS' if ok else 'FAIL'}", file=stdout)
    return EXIT_OK if ok else EXIT_FAILED


_COMMANDS = {
    "oracle": cmd_oracle,
    "simulate-sde": cmd_simulate_sde,
    "solve-moments": cmd_solve_moments,
    "simulate-chain": cmd_simulate_chain,
    "verify": cmd_verify,
}


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(stderr)
        print("dyadic-lab: error: a command is required", file=stderr)
        return EXIT_USAGE
    try:
        cfg = resolve(args)
        return _COMMANDS[args.command](cfg, stdout)
    except UsageError as exc:
        parser.print_usage(stderr)
        print(f"dyadic-lab: error: {exc}", file=stderr)
        return EXIT_USAGE
    except RangeError as exc:
        print(f"dyadic-lab: range error: {exc}", file=stderr)
        return EXIT_RANGE
    except ValueError as exc:
        print(f"dyadic-lab: error: {exc}", file=stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dyadic-lab: I/O error: {exc}", file=stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
