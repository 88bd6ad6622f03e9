"""Command-line front end: ``stiffkit <command> ...``.

Commands
--------
analyze         conditioning report of a problem file or builtin
sweep           one report per grid point of a benchmark case, as CSV
check-discrete  does a fixed-step discretization well represent the problem?
mesh-select     conditioning-driven mesh selection for a boundary value problem
list-problems   builtin problems and benchmark cases
verify-goldens  re-run the golden recipes and compare with the stored CSVs

Exit codes: 0 success (nonstiff / well represented / converged), 1 error,
10 stiff, 11 ill conditioned, 12 not well represented or not converged.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

import numpy as np

from . import conditioning as cond
from .analysis import AnalysisOptions, analyze, check_discrete, reference_solution
from .errors import StiffkitError
from .export import fmt
from .integrate import EXPLICIT_EULER, IMPLICIT_EULER, TRAPEZOIDAL, Mesh
from .problem import Problem, ProblemSpec, build_problem, load_spec

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_STIFF = 10
EXIT_ILL_CONDITIONED = 11
EXIT_NOT_REPRESENTED = 12

class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("conditioning options")
    g.add_argument("--norm", choices=cond.NORMS, default="inf", help="vector norm (default inf)")
    g.add_argument("--threshold", type=float, default=cond.STIFF_THRESHOLD,
                   help="sigma at or above which a problem is called stiff")
    g.add_argument("--kappa-threshold", type=float, default=cond.KAPPA_THRESHOLD,
                   help="kappa above which a problem is called ill conditioned")
    g.add_argument("--seed", type=int, default=None,
                   help="seed of the random directions (default: $STIFFKIT_SEED or 42)")
    g.add_argument("--directions", type=int, default=cond.DEFAULT_RANDOM_DIRECTIONS, metavar="K",
                   help="number of random perturbation directions")
    g.add_argument("--rtol", type=float, default=None, help="integrator relative tolerance")
    g.add_argument("--bvp-tol", type=float, default=None, help="collocation tolerance")
    return common


def _problem_options() -> argparse.ArgumentParser:
    src = argparse.ArgumentParser(add_help=False)
    g = src.add_argument_group("problem")
    g.add_argument("problem", nargs="?", help="problem file (TOML)")
    g.add_argument("--builtin", metavar="NAME", help="builtin problem (see list-problems)")
    g.add_argument("--lambda", dest="lam", metavar="VALUE",
                   help="scalar eigenvalue, may be complex (e.g. 6.283j)")
    g.add_argument("--eps", type=float, help="perturbation parameter epsilon")
    g.add_argument("--mu", type=float, help="parameter mu")
    g.add_argument("--T", type=float, help="interval length")
    g.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="any other builtin parameter (repeatable)")
    return src


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stiffkit",
                                     description="Conditioning-based stiffness analysis of ODE problems.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common, source = _common_options(), _problem_options()

    p = sub.add_parser("analyze", parents=[source, common], help="conditioning report")
    p.add_argument("-o", "--output", help="also write the report to this file")
    p.add_argument("--no-hill-climb", action="store_true", help="only evaluate the direction set")

    p = sub.add_parser("sweep", parents=[common], help="parameter sweep of a benchmark case")
    p.add_argument("case", help="benchmark case (see list-problems)")
    p.add_argument("--grid", help="'a:b' for the decades from a to b, or a comma list")
    p.add_argument("-o", "--output", help="CSV file (default: stdout)")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes for independent points")

    p = sub.add_parser("check-discrete", parents=[source, common],
                       help="well-representation check of a fixed-step method")
    p.add_argument("--method", default=IMPLICIT_EULER,
                   choices=(EXPLICIT_EULER, IMPLICIT_EULER, TRAPEZOIDAL))
    m = p.add_mutually_exclusive_group()
    m.add_argument("--N", type=int, default=100, help="uniform mesh with N steps (default 100)")
    m.add_argument("--mesh", help="mesh file, one node per line")
    p.add_argument("--eta", help="comma-separated perturbation direction (default: eta*)")
    p.add_argument("--tol-factor", type=float, default=2.0)
    p.add_argument("--strict", action="store_true",
                   help="require both conditions; by default the exit code follows (wr1)")

    p = sub.add_parser("mesh-select", parents=[source, common],
                       help="conditioning-driven mesh selection")
    p.add_argument("--initial-N", type=int, default=32)
    p.add_argument("--max-rounds", type=int, default=20)
    p.add_argument("--tol-factor", type=float, default=2.0)
    p.add_argument("--mesh-out", default="mesh.txt", help="final mesh file (default mesh.txt)")
    p.add_argument("--history", default="history.csv", help="round history CSV (default history.csv)")

    sub.add_parser("list-problems", help="builtin problems and benchmark cases")

    p = sub.add_parser("verify-goldens", help="re-run the golden recipes")
    p.add_argument("directory", nargs="?", help="golden directory (default: the bundled one)")
    p.add_argument("--regenerate", action="store_true", help="overwrite the stored CSVs")
    p.add_argument("--only", action="append", default=[], metavar="RECIPE",
                   help="restrict to these recipes (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="recipes run in parallel")
    return parser


# --------------------------------------------------------------------------
# helpers


def options_from(args) -> AnalysisOptions:
    opts = AnalysisOptions(norm=args.norm, threshold=args.threshold,
                           kappa_threshold=args.kappa_threshold, seed=args.seed,
                           directions=args.directions,
                           hill_climb=not getattr(args, "no_hill_climb", False))
    if args.rtol is not None:
        opts.rtol = args.rtol
    if args.bvp_tol is not None:
        opts.bvp_tol = args.bvp_tol
    return opts


def parse_complex(text: str) -> complex:
    """Accepts ``-2``, ``6.28j``, ``-1+2j`` and the same with ``i``."""
    try:
        return complex(text.strip().replace(" ", "").replace("i", "j"))
    except ValueError:
        raise CliError(f"cannot parse {text!r} as a number") from None


def _builtin_params(args) -> dict:
    params = {}
    if args.lam is not None:
        lam = parse_complex(args.lam)
        if lam.imag != 0:
            raise CliError("complex lambda is only supported by 'analyze --builtin scalar'")
        params["lambda"] = lam.real
    for name in ("eps", "mu"):
        if getattr(args, name) is not None:
            params[name] = getattr(args, name)
    for item in args.param:
        name, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--param expects NAME=VALUE, got {item!r}")
        try:
            params[name.strip()] = float(value)
        except ValueError:
            raise CliError(f"--param {name}: {value!r} is not a number") from None
    return params


def load_problem(args) -> Problem:
    """Problem from a file or ``--builtin``, with the command-line overrides."""
    if (args.problem is None) == (args.builtin is None):
        raise CliError("give exactly one of a problem file or --builtin NAME")
    params = _builtin_params(args)
    if args.builtin is not None:
        interval = None if args.T is None else (0.0, args.T)
        return build_problem(ProblemSpec(builtin=args.builtin, params=params, interval=interval))
    try:
        spec = load_spec(args.problem)
    except OSError as exc:
        raise CliError(f"cannot read {args.problem}: {exc.strerror}") from None
    changes = {}
    if params:
        changes["params"] = {**dict(spec.params), **params}
    if args.T is not None:
        a = spec.interval[0] if spec.interval is not None else 0.0
        changes["interval"] = (a, a + args.T)
    return build_problem(spec.replace(**changes) if changes else spec)


def _oscillatory_lambda(args) -> Optional[complex]:
    if args.lam is None:
        return None
    lam = parse_complex(args.lam)
    if lam.imag == 0:
        return None
    if args.builtin != "scalar" or args.problem is not None:
        raise CliError("complex lambda is only supported by 'analyze --builtin scalar'")
    return lam


def read_mesh(path) -> Mesh:
    try:
        with open(path, encoding="utf-8") as fh:
            nodes = [float(line) for line in fh if line.strip()]
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError(f"bad mesh file {path}: {exc}") from None
    return Mesh(np.array(nodes))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def analysis_exit_code(report: cond.ConditioningReport) -> int:
    if report.flags.ill_conditioned:
        return EXIT_ILL_CONDITIONED
    return EXIT_STIFF if report.flags.stiff else EXIT_OK


# --------------------------------------------------------------------------
# commands


def cmd_analyze(args, out) -> int:
    options = options_from(args)
    lam = _oscillatory_lambda(args)
    if lam is not None:
        T = args.T if args.T is not None else 1.0
        report = cond.oscillatory_report(lam, T, options.threshold, options.kappa_threshold)
        report.problem = "scalar"
    else:
        report = analyze(load_problem(args), options).report
    text = report.to_text()
    out.write(text)
    if args.output:
        _write_text(args.output, text)
    return analysis_exit_code(report)


def cmd_sweep(args, out) -> int:
    from .suite import load_case, parse_grid, run_sweep

    case = load_case(args.case)
    grid = parse_grid(args.grid) if args.grid else None
    table = run_sweep(case, options_from(args), grid=grid, jobs=args.jobs)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            table.write(fh)
        for row in table.rows:
            out.write(f"{args.case} {case.param}={fmt(row[0])}: sigma={fmt(row[3])} [{row[-1]}]\n")
    else:
        table.write(out)
    ok = [s == "ok" for s in table.statuses()]
    if case.expected_scaling is not None and sum(ok) >= 2:
        expo, tol = case.expected_scaling
        sys.stderr.write(f"slope of log sigma vs log(1/{case.param}) = {table.slope():.4f} "
                         f"(expected {expo} +- {tol})\n")
    return EXIT_OK


def _parse_eta(text: Optional[str], dim: int) -> Optional[np.ndarray]:
    if text is None:
        return None
    try:
        eta = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise CliError(f"bad --eta {text!r}") from None
    if eta.shape != (dim,):
        raise CliError(f"--eta needs {dim} components")
    return eta


def cmd_check_discrete(args, out) -> int:
    problem = load_problem(args)
    mesh = read_mesh(args.mesh) if args.mesh else Mesh.uniform(problem.T, args.N)
    if abs(mesh.T - problem.T) > 1e-12 * max(1.0, problem.T) or mesh.nodes[0] != 0.0:
        raise CliError(f"mesh must span [0, {fmt(problem.T)}]")
    check = check_discrete(problem, args.method, mesh, options_from(args), args.tol_factor,
                           eta=_parse_eta(args.eta, problem.dim))
    d, v = check.discrete, check.verdict
    lines = [
        f"problem = {problem.name}",
        f"method = {check.method}",
        f"N = {check.N}",
        f"eta = [{', '.join(fmt(float(x)) for x in check.eta)}]",
        f"kappa_c = {fmt(check.kappa_c)}",
        f"gamma_c = {fmt(check.gamma_c)}",
        f"sigma_c = {fmt(check.kappa_c / check.gamma_c)}",
        f"kappa_d = {fmt(d.kappa)}",
        f"gamma_d = {fmt(d.gamma)}",
        f"sigma_d = {fmt(d.sigma)}",
        f"wr1 = {'pass' if v.kappa_ok else 'fail'} (|log(kappa_d / kappa_c)| = {fmt(v.kappa_ratio)})",
        f"wr2 = {'pass' if v.gamma_ok else 'fail'} (|log(gamma_d / gamma_c)| = {fmt(v.gamma_ratio)})",
        f"machine_precision_reached = {'true' if d.machine_precision_reached else 'false'}",
    ]
    if check.dichotomy is not None:
        lines.append(f"discrete_dichotomy = {check.dichotomy.verdict}")
    passed = v.passed if args.strict else v.kappa_ok
    lines.append(f"verdict = {'well represented' if passed else 'not well represented'}"
                 + (" (strict)" if args.strict else ""))
    out.write("\n".join(lines) + "\n")
    return EXIT_OK if passed else EXIT_NOT_REPRESENTED


def cmd_mesh_select(args, out) -> int:
    from .meshsel import select_mesh

    problem = load_problem(args)
    if problem.is_ivp:
        raise CliError("mesh-select needs a boundary value problem")
    options = options_from(args)
    nominal = reference_solution(problem, options)
    result = select_mesh(problem, Mesh.uniform(problem.T, args.initial_N), args.tol_factor,
                         args.max_rounds, options.norm, nominal=nominal)
    _write_text(args.mesh_out, result.mesh_text())
    with open(args.history, "w", encoding="utf-8", newline="") as fh:
        result.history_csv(fh)
    for r in result.history:
        out.write(f"round {r.round}: N = {r.N}, kappa_d = {fmt(r.kappa_d)}, gamma_d = {fmt(r.gamma_d)}, "
                  f"mismatch = {r.mismatch:.4g}, {'pass' if r.verdict else 'fail'}\n")
    out.write(f"converged = {'true' if result.converged else 'false'}, N = {result.mesh.N}, "
              f"rollbacks = {result.rollbacks}\n")
    return EXIT_OK if result.converged else EXIT_NOT_REPRESENTED


def cmd_list_problems(args, out) -> int:
    from .suite import BUILTINS, CASES

    out.write("builtin problems:\n")
    for name, entry in BUILTINS.items():
        defaults = ", ".join(f"{k}={fmt(v)}" for k, v in entry.defaults.items())
        out.write(f"  {name:16s} {entry.description}" + (f" [{defaults}]" if defaults else "") + "\n")
    out.write("benchmark cases:\n")
    for name, case in CASES.items():
        grid = ", ".join(fmt(v) for v in case.grid)
        extra = " (continuation)" if case.continuation else ""
        out.write(f"  {name:16s} {case.param} in {{{grid}}}{extra}\n")
    return EXIT_OK


def cmd_verify_goldens(args, out) -> int:
    from .report import verify_goldens

    summary = verify_goldens(args.directory, regenerate=args.regenerate,
                             only=args.only or None, jobs=args.jobs)
    out.write(summary.text())
    return EXIT_OK if summary.passed else EXIT_ERROR


COMMANDS = {
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "check-discrete": cmd_check_discrete,
    "mesh-select": cmd_mesh_select,
    "list-problems": cmd_list_problems,
    "verify-goldens": cmd_verify_goldens,
}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args, out)
    except (CliError, StiffkitError, ValueError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"stiffkit {args.command}: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
