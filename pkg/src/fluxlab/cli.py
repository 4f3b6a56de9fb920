"""Command line runner: ``fluxlab run <config>`` and ``fluxlab check``.

A configuration is an INI file with an ``[experiment]`` section::

    [experiment]
    name = table1a
    case = manufactured        ; manufactured | slit
    degree = 1
    refinement = uniform       ; uniform | adaptive
    flux = both                ; local | global_mixed | both
    estimators = energy        ; energy, or any of rho_varpi II_star rho_tau I_star DWR_star
    steps = 5                  ; uniform levels or adaptive steps
    n0 = 8                     ; base grid (uniform level l uses n0 * 2^l)
    fraction = 0.33
    skip = 0                   ; adaptive steps run but not reported
    goal = regularized_point   ; required for goal estimators
    export = no                ; write final mesh and solution
    seed = 0

and an optional ``[reference]`` section with ``cache = DIR``.
"""

import argparse
import configparser
import csv
import io
import math
import os
import sys
import tempfile

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ENERGY_COLUMNS = ("level", "dofs", "true_sq_err", "rate", "eta_mixed", "ieff_mixed", "eta_local", "ieff_local")
HISTORY_COLUMNS = ("step", "dofs", "true_err", "eta", "i_eff", "i_osc", "rate")
PERFORMANCE_COLUMNS = ("estimator", "step", "dofs", "goal_err")
GOAL_ESTIMATORS = ("rho_varpi", "II_star", "rho_tau", "I_star", "DWR_star")
INT_COLUMNS = {"level", "dofs", "step"}


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


# -- CSV ---------------------------------------------------------------------------

def format_number(x):
    """3 significant digits, exponent without padding: 2.84e-4."""
    if x is None:
        return ""
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    x = float(x)
    if not math.isfinite(x):
        raise NumericError(f"non-finite value {x!r} in a table")
    mant, exp = f"{x:.2e}".split("e")
    return f"{mant}e{int(exp)}"


def goal_columns(kinds):
    cols = ["level", "dofs", "goal_err", "rate"]
    for k in kinds:
        cols += [f"eta_{k}", f"ieff_{k}", f"iosc_{k}"]
    return tuple(cols)


def table_format(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        out = []
        for c in columns:
            v = r.get(c)
            if c in INT_COLUMNS and v is not None:
                out.append(str(int(v)))
            elif isinstance(v, str):
                out.append(v)
            else:
                out.append(format_number(v))
        w.writerow(out)
    return buf.getvalue()


def table_parse(text):
    """Inverse of table_format: list of dicts (ints, floats, strings or None)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = []
    for rec in reader:
        row = {}
        for c, v in zip(header, rec):
            if v == "":
                row[c] = None
            elif c in INT_COLUMNS:
                row[c] = int(v)
            else:
                try:
                    row[c] = float(v)
                except ValueError:
                    row[c] = v
        rows.append(row)
    return rows


def write_atomic(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- configuration -------------------------------------------------------------------

def load_config(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise ConfigError(f"cannot read configuration {path}")
    if "experiment" not in cp:
        raise ConfigError("missing [experiment] section")
    e = cp["experiment"]
    try:
        cfg = dict(
            case=e.get("case", "").strip(),
            degree=e.getint("degree", 1),
            refinement=e.get("refinement", "uniform").strip(),
            flux=e.get("flux", "local").strip(),
            estimators=[s for s in e.get("estimators", "energy").replace(",", " ").split() if s],
            steps=e.getint("steps", 5),
            n0=e.getint("n0", 8),
            fraction=e.getfloat("fraction", 0.33),
            skip=e.getint("skip", 0),
            goal=e.get("goal", "").strip() or None,
            export=e.getboolean("export", False),
            seed=e.getint("seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg["name"] = e.get("name", cfg["case"]).strip()
    cfg["cache"] = cp.get("reference", "cache", fallback=None)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    from .cases import CASES
    if cfg["case"] not in CASES:
        raise ConfigError(f"unknown case {cfg['case']!r}; choose from {sorted(CASES)}")
    if cfg["degree"] not in (1, 2, 3):
        raise ConfigError("degree must be 1, 2 or 3")
    if cfg["refinement"] not in ("uniform", "adaptive"):
        raise ConfigError("refinement must be uniform or adaptive")
    if cfg["flux"] not in ("local", "global_mixed", "both"):
        raise ConfigError("flux must be local, global_mixed or both")
    if cfg["steps"] < 0 or cfg["skip"] < 0:
        raise ConfigError("steps and skip must be non-negative")
    if cfg["n0"] < 1 or (cfg["case"] == "slit" and cfg["n0"] % 2):
        raise ConfigError("n0 must be positive (and even on the slit domain)")
    if not 0 < cfg["fraction"] <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    ests = cfg["estimators"]
    if not ests:
        raise ConfigError("no estimators given")
    energy = ests == ["energy"]
    if not energy and any(k not in GOAL_ESTIMATORS for k in ests):
        raise ConfigError(f"estimators must be 'energy' or a subset of {GOAL_ESTIMATORS}")
    if not energy and cfg["goal"] != "regularized_point":
        raise ConfigError("goal estimators need goal = regularized_point")
    if not energy and cfg["flux"] == "global_mixed":
        raise ConfigError("goal estimators use the local flux reconstruction")


# -- running ---------------------------------------------------------------------------

def _reference(case, cfg, out):
    from .cases import reference_values
    if case.u is not None:
        return None
    cache = cfg["cache"] or os.environ.get("FLUXLAB_CACHE") or os.path.join(out, "reference-cache")
    return reference_values(case, cache_dir=cache, log=lambda s: print(s, file=sys.stderr))


def _export(step, out, name):
    from .mesh import export_text
    from .space import export_field
    export_text(step.mesh, os.path.join(out, f"{name}-mesh.txt"))
    export_field(step.u, os.path.join(out, f"{name}-u.txt"))


def _run_uniform(cfg, case, ref, out):
    from .adapt import uniform_energy_study, uniform_goal_study
    last = {}
    keep = lambda step, row: last.update(step=step)
    if cfg["estimators"] == ["energy"]:
        rows = uniform_energy_study(case, cfg["degree"], cfg["steps"], cfg["n0"], cfg["flux"], ref, keep)
        files = {f"{cfg['name']}.csv": table_format(rows, ENERGY_COLUMNS)}
    else:
        kinds = tuple(cfg["estimators"])
        rows = uniform_goal_study(case, cfg["degree"], cfg["steps"], cfg["n0"], kinds, ref, keep)
        files = {f"{cfg['name']}.csv": table_format(rows, goal_columns(kinds))}
    return files, last.get("step")


def _run_adaptive(cfg, case, ref, out):
    from .adapt import afem_run
    files = {}
    last = {}
    keep = lambda step, row: last.update(step=step)
    steps = cfg["steps"] + cfg["skip"] if cfg["steps"] else 0
    if cfg["estimators"] == ["energy"]:
        kind = "energy_local" if cfg["flux"] == "local" else "energy_mixed"
        hist = afem_run(case, kind, cfg["degree"], steps, cfg["fraction"], cfg["n0"], ref, callback=keep)
        rows = []
        for r in hist.rows[cfg["skip"]:]:
            rows.append(dict(r, level=r["step"] - cfg["skip"], true_sq_err=r["true_err"],
                             rate=-r["rate"] if r["rate"] == r["rate"] else None))
        if rows and cfg["skip"] == 0:
            rows[0]["rate"] = None
        files[f"{cfg['name']}.csv"] = table_format(rows, ENERGY_COLUMNS)
        return files, last.get("step")
    perf = []
    for kind in cfg["estimators"]:
        hist = afem_run(case, kind, cfg["degree"], steps, cfg["fraction"], cfg["n0"], ref, callback=keep)
        rows = [dict(r, rate=None if r["rate"] != r["rate"] else r["rate"]) for r in hist.rows[cfg["skip"]:]]
        files[f"{cfg['name']}-{kind}.csv"] = table_format(rows, HISTORY_COLUMNS)
        perf += [dict(estimator=kind, step=r["step"], dofs=r["dofs"], goal_err=r["true_err"]) for r in rows]
    files[f"{cfg['name']}-performance.csv"] = table_format(perf, PERFORMANCE_COLUMNS)
    return files, last.get("step")


def run(cfg, out):
    from .cases import make_case
    case = make_case(cfg["case"])
    ref = _reference(case, cfg, out) if cfg["steps"] else None
    runner = _run_uniform if cfg["refinement"] == "uniform" else _run_adaptive
    files, last = runner(cfg, case, ref, out)
    for name, text in files.items():
        write_atomic(os.path.join(out, name), text)
        print(os.path.join(out, name))
    if cfg["export"] and last is not None:
        _export(last, out, cfg["name"])
    return EXIT_OK


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fluxlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment configuration")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=".")
    p_run.add_argument("--threads", type=int, default=None)
    sub.add_parser("check", help="run the invariant self-checks on small meshes")
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        _set_threads(args.threads)
    if args.command == "check":
        from .selfcheck import run_checks
        return EXIT_OK if run_checks() else EXIT_FAIL
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .linalg import SolverError
    from .mesh import MeshError
    try:
        return run(cfg, args.out)
    except (SolverError, MeshError, NumericError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
