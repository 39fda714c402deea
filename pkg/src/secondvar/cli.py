"""Command-line front end.

Every subcommand writes one JSON (or text) document to stdout or ``--out``;
``--traces DIR`` additionally writes plot-ready CSV files.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import examples, numerics
from .audit import audit, g_spectrum, render_json, render_report
from .fields import fields_csv, provider
from .jacobi import conjugate_points, conjugate_scan_csv
from .normality import abnormality_space, local_normality_scan
from .pontryagin import PontryaginError, regularity_scan, shoot, verify_extremal
from .problem import ControlProblem, ProblemError, check_derivatives, load_problem_file
from .riccati import RiccatiError, integrate_riccati, linear_KE, riccati_csv, riccati_from_KE, sufficiency_certificate

EXIT_USAGE = 64
EXIT_IO = 74
EXIT_ERROR = 3

CSV_COLUMNS = """\
CSV traces (written to --traces DIR):
  extremal.csv   t, q1..qn, p1..pn, z1..zr
  fields.csv     t, G11..Grr, N11..Nnn, M11..Mnn, tau11..taunn (row-major)
  conjugate.csv  t, det_B, sigma_min_B
  riccati.csv    t, C11..Cnn, det_K, asymmetry
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("problem", nargs="?", help="problem config file (TOML)")
    p.add_argument("--builtin", help=f"built-in problem: {', '.join(examples.names())}")
    p.add_argument("--out", help="write the JSON/text document here instead of stdout")
    p.add_argument("--traces", metavar="DIR", nargs="?", const="traces", help="write CSV traces into DIR")
    p.add_argument("--samples", type=int, default=401, help="rows per CSV trace (default 401)")
    p.add_argument(
        "--tol",
        action="append",
        default=[],
        metavar="NAME=VALUE",
        help="override a tolerance (ode_tol, newton_tol, ...) or the interval end-points t0/t1",
    )
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel scans")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="secondvar",
        description="Second-order optimality audits for constrained variational problems.",
        epilog=CSV_COLUMNS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "audit": "full decision procedure (exit 0 minimum, 1 not_minimum, 2 inconclusive, 3 error)",
        "solve": "shoot the extremal and verify it",
        "conjugate": "conjugate times along the extremal",
        "riccati": "Riccati solution, (K, E) reconstruction and the sufficiency certificate",
        "normality": "abnormality dimension and windowed local-normality scan",
        "fields": "field matrices G, N, M, tau along the extremal",
        "check-derivatives": "symbolic derivatives against finite differences",
        "examples": "list built-in problems and their oracle coverage",
    }
    subs = {}
    for name, text in helps.items():
        subs[name] = sub.add_parser(
            name, help=text, description=text, epilog=CSV_COLUMNS, formatter_class=argparse.RawDescriptionHelpFormatter
        )
        if name != "examples":
            _common(subs[name])
        else:
            subs[name].add_argument("--format", choices=("json", "text"), default="json")
            subs[name].add_argument("--out")
    subs["audit"].add_argument("--window", type=int, default=8, help="local-normality windows (default 8)")
    subs["conjugate"].add_argument("--t-end", type=float, help="scan up to this time (default t1)")
    subs["conjugate"].add_argument("--frame", action="store_true", help="propagate in the h-transported frame")
    subs["normality"].add_argument("--window", type=int, default=8, help="number of windows (default 8)")
    subs["normality"].add_argument("--grid", type=int, default=128, help="constraint samples per window")
    subs["check-derivatives"].add_argument("--points", type=int, default=100, help="random probe points")
    subs["check-derivatives"].add_argument("--seed", type=int, default=0)
    subs["check-derivatives"].add_argument("--step", type=float, default=1e-5)
    return parser


def _overrides(items: list[str]) -> dict[str, float]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--tol expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--tol value for {name!r} is not a number") from None
    if "newton_max_iter" in out:
        out["newton_max_iter"] = int(out["newton_max_iter"])
    return out


def _problem(args) -> ControlProblem:
    if (args.problem is None) == (args.builtin is None):
        raise UsageError("give exactly one of a problem file or --builtin")
    if args.builtin is not None:
        try:
            p = examples.builtin(args.builtin).problem
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    else:
        p = load_problem_file(args.problem)
    tol = _overrides(args.tol)
    if tol:
        try:
            p = p.with_options(**tol)
        except (TypeError, ProblemError) as exc:
            raise UsageError(f"bad --tol: {exc}") from None
    return p


def _emit(doc: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(doc)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(doc)


def _render(d: dict, fmt: str) -> str:
    if fmt == "json":
        return render_json(d)
    lines = []

    def walk(prefix, v):
        if isinstance(v, dict):
            for k, x in v.items():
                walk(f"{prefix}{k}.", x)
        elif isinstance(v, list) and v and all(isinstance(x, dict) for x in v):
            for k, x in enumerate(v):
                walk(f"{prefix}{k}.", x)
        else:
            lines.append(f"{prefix[:-1]}: {v}")

    walk("", d)
    return "\n".join(lines) + "\n"


def _write_traces(args, files: dict[str, str]) -> None:
    if not args.traces:
        return
    os.makedirs(args.traces, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(args.traces, name), "w", encoding="utf-8") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_audit(args) -> int:
    p = _problem(args)
    report = audit(p, window_count=args.window, traces=bool(args.traces), jobs=args.jobs)
    _emit(render_report(report, args.format, traces=bool(args.traces)), args.out)
    if args.traces and report.verdict != "error":
        e = shoot(p)
        files = {"extremal.csv": e.to_csv(args.samples), "fields.csv": fields_csv(e, args.samples)}
        files["conjugate.csv"] = conjugate_scan_csv(e, samples=args.samples)
        try:
            ke = linear_KE(e, np.eye(e.n), np.zeros((e.n, e.n)))
            files["riccati.csv"] = riccati_csv(e, riccati_from_KE(ke), ke, args.samples)
        except (RiccatiError, numerics.IntegrationError):
            pass
        _write_traces(args, files)
    return report.exit_code


def cmd_solve(args) -> int:
    p = _problem(args)
    e = shoot(p)
    reg = regularity_scan(e)
    doc = {
        "p0": [float(x) for x in e.p0],
        "q_t1": [float(x) for x in e.q(e.t1)],
        "shooting_residual": e.shooting_residual,
        "residuals": verify_extremal(e).as_dict(),
        "regularity": {"min_abs_det": reg.min_abs_det, "t": reg.t_min},
        "branch_jumps": [[float(t), float(j)] for t, j in e.branch_jumps],
    }
    _emit(_render(doc, args.format), args.out)
    _write_traces(args, {"extremal.csv": e.to_csv(args.samples)})
    return 0


def cmd_conjugate(args) -> int:
    p = _problem(args)
    e = shoot(p)
    t_end = e.t1 if args.t_end is None else args.t_end
    if t_end > e.t1:
        e = e.extend(t_end)
    cps = conjugate_points(e, t_end, frame=args.frame)
    doc = {
        "scan": [e.t0, t_end],
        "frame": bool(args.frame),
        "delta": 1e-6 * (p.t1 - p.t0),
        "conjugate_times": [c.as_dict() for c in cps],
    }
    _emit(_render(doc, args.format), args.out)
    _write_traces(args, {"conjugate.csv": conjugate_scan_csv(e, t_end, args.samples)})
    return 0


def cmd_riccati(args) -> int:
    p = _problem(args)
    e = shoot(p)
    n = e.n
    direct = integrate_riccati(e, np.zeros((n, n)))
    ke = linear_KE(e, np.eye(n), np.zeros((n, n)))
    rec = riccati_from_KE(ke, p.options.root_tol)
    cert = sufficiency_certificate(e)
    doc = {
        "direct": {
            "escape_time": direct.escape_time,
            "defined_until": direct.tb,
            "max_asymmetry": direct.max_asymmetry,
        },
        "from_KE": {
            "escape_time": rec.escape_time,
            "defined_until": rec.tb,
            "max_asymmetry": rec.max_asymmetry,
            "riccati_residual": rec.riccati_residual,
        },
        "certificate": cert.as_dict(traces=bool(args.traces)),
    }
    _emit(_render(doc, args.format), args.out)
    _write_traces(args, {"riccati.csv": riccati_csv(e, rec, ke, args.samples)})
    return 0


def cmd_normality(args) -> int:
    p = _problem(args)
    bp = examples.builtin(p.builtin) if p.builtin else None
    if bp is not None and bp.section is not None:
        e = bp.section(p)  # prescribed admissible section
    else:
        e = shoot(p)
    whole = abnormality_space(e, e.t0, e.t1, args.grid)
    scan = local_normality_scan(e, args.window, args.grid, jobs=args.jobs)
    doc = {"source": e.source, "global": whole.as_dict(), **scan.as_dict()}
    _emit(_render(doc, args.format), args.out)
    return 0


def cmd_fields(args) -> int:
    p = _problem(args)
    e = shoot(p)
    fp = provider(e)
    reg = regularity_scan(e)
    doc = {
        "g_spectrum": g_spectrum(e),
        "regularity": {"min_abs_det": reg.min_abs_det, "t": reg.t_min},
        "cache": {"used": fp.cached, "max_interpolation_error": fp.cache_error},
    }
    _emit(_render(doc, args.format), args.out)
    _write_traces(args, {"fields.csv": fields_csv(e, args.samples)})
    return 0


def cmd_check_derivatives(args) -> int:
    p = _problem(args)
    rng = np.random.default_rng(args.seed)
    worst, worst_point, worst_key = 0.0, None, None
    for _ in range(args.points):
        t = float(rng.uniform(p.t0, p.t1))
        point = (t, rng.uniform(-1, 1, p.n), rng.uniform(-1, 1, p.r))
        rep = check_derivatives(p, point, args.step)
        if rep.max_deviation >= worst:
            worst = rep.max_deviation
            worst_point = [t, [float(x) for x in point[1]], [float(x) for x in point[2]]]
            worst_key = max(rep.deviations, key=rep.deviations.get)
    passed = worst <= 1e-6
    doc = {
        "points": args.points,
        "step": args.step,
        "max_deviation": worst,
        "worst_partial": worst_key,
        "worst_point": worst_point,
        "passed": passed,
    }
    _emit(_render(doc, args.format), args.out)
    return 0 if passed else 1


def cmd_examples(args) -> int:
    doc = {
        "examples": [
            {
                "name": name,
                "description": examples.builtin(name).description,
                "oracles": {k: o.kind for k, o in examples.builtin(name).oracles.items()},
            }
            for name in examples.names()
        ]
    }
    if args.format == "text":
        lines = []
        for item in doc["examples"]:
            cover = ", ".join(f"{k} ({v})" for k, v in item["oracles"].items()) or "property tests only"
            lines.append(f"{item['name']}: {item['description']}\n  oracles: {cover}")
        _emit("\n".join(lines) + "\n", args.out)
    else:
        _emit(render_json(doc), args.out)
    return 0


COMMANDS = {
    "audit": cmd_audit,
    "solve": cmd_solve,
    "conjugate": cmd_conjugate,
    "riccati": cmd_riccati,
    "normality": cmd_normality,
    "fields": cmd_fields,
    "check-derivatives": cmd_check_derivatives,
    "examples": cmd_examples,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    except (ProblemError, PontryaginError, RiccatiError, numerics.IntegrationError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
