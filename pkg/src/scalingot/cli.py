"""Command-line front end.

Exit status: 0 when the solve converged, 2 when it stopped without meeting
its stopping rule, 1 for usage and input errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import List, Optional

import numpy as np

from .costs import load_cost_matrix, make_cost
from .kernel import ProblemSpec, write_coupling
from .measures import DiscreteMeasure, GridGeometry
from .proxdiv import StarvationError
from .reference import auction_solve, iteration_scaling_study
from .solvers import (DivergedError, LInfMarginal, PrimalDualGap, SolverConfig,
                      barycenter_specs, default_eps_lists, gradient_flow, parse_eps, solve_barycenter,
                      solve_full, solve_wfr_barycenter)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# measure files

def read_measure(path) -> DiscreteMeasure:
    """Read ``# shape: n1 [n2 [n3]] spacing: h`` followed by one value per line."""
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    with fh:
        lines = fh.read().splitlines()
    if not lines:
        raise UsageError(f"{path}:1: empty file")
    head = lines[0].lstrip("#").split()
    try:
        i_shape, i_sp = head.index("shape:"), head.index("spacing:")
        shape = tuple(int(t) for t in head[i_shape + 1:i_sp])
        spacing = float(head[i_sp + 1])
        if not 1 <= len(shape) <= 3:
            raise ValueError
    except (ValueError, IndexError):
        raise UsageError(f"{path}:1: expected header '# shape: n1 [n2 [n3]] spacing: h'") from None
    vals = []
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s:
            continue
        try:
            vals.append(float(s))
        except ValueError:
            raise UsageError(f"{path}:{lineno}: not a number: {s!r}") from None
    try:
        geom = GridGeometry(shape, spacing)
        return DiscreteMeasure(np.array(vals), geom)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def write_measure(path, measure: DiscreteMeasure, geometry: Optional[GridGeometry] = None) -> None:
    g = geometry or measure.geometry
    with open(path, "w") as fh:
        fh.write(f"# shape: {' '.join(str(n) for n in g.shape)} spacing: {g.spacing!r}\n")
        for v in measure.weights.tolist():
            fh.write(f"{v!r}\n")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = (t.strip() for t in s.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


_UNSET = object()


def _explicit_options(argv) -> set:
    """Destinations given on the command line, found by re-parsing with sentinel defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{a.dest: _UNSET for a in sub._actions if a.dest != "help"})
    again = parser.parse_args(argv)
    return {k for k, v in vars(again).items() if v is not _UNSET}


def _apply_config(args, parser, argv=None):
    if not getattr(args, "config", None):
        return
    known = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    explicit = _explicit_options(argv)
    for key, val in read_config(args.config).items():
        if key not in known:
            raise UsageError(f"{args.config}: unknown key {key!r}")
        if key in explicit:
            continue  # command line wins
        act = known[key]
        try:
            if act.nargs in ("+", "*"):
                conv = [act.type(t) if act.type else t for t in val.split()]
            else:
                conv = act.type(val) if act.type else val
        except ValueError:
            raise UsageError(f"{args.config}: bad value for {key!r}: {val!r}") from None
        if act.choices is not None and conv not in act.choices:
            raise UsageError(f"{args.config}: {key} must be one of {sorted(act.choices)}")
        setattr(args, key, conv)


# ----------------------------------------------------------------------------
# commands

def _config(args) -> SolverConfig:
    rule = None
    if args.stop == "linf":
        rule = LInfMarginal(args.tol if args.tol is not None else 1e-7)
    elif args.stop == "gap":
        rule = PrimalDualGap(args.tol if args.tol is not None else 1e-6)
    return SolverConfig(theta=args.theta, tau=args.tau, stop_rule=rule, max_iterations=args.max_iter,
                        absorption_check_every=args.absorb_every)


def _write_report(path, report):
    text = report.to_json(indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _status(report) -> int:
    return 0 if report.converged else 2


def cmd_solve(args) -> int:
    mu = read_measure(args.mu)
    nu = read_measure(args.nu)
    if args.cost == "matrix":
        if not args.cost_matrix:
            raise UsageError("--cost matrix needs --cost-matrix FILE")
        try:
            cost = load_cost_matrix(args.cost_matrix)
        except OSError as exc:
            raise UsageError(f"{args.cost_matrix}: {exc.strerror}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if cost.shape != (len(mu), len(nu)):
            raise UsageError(f"cost matrix shape {cost.shape} does not match the measures")
    else:
        cost = make_cost(args.cost, mu.geometry, nu.geometry)
    if args.lam is None:
        spec = ProblemSpec.optimal_transport(cost, mu, nu)
    else:
        spec = ProblemSpec.unbalanced(cost, mu, nu, args.lam)
    h = max(cost.geometry_x.spacing, cost.geometry_y.spacing)
    eps_final = parse_eps(args.eps_final, h)
    eps_lists = default_eps_lists(spec, eps_final, factor=args.eps_factor,
                                  finest_only=args.single_level)
    state, report = solve_full(spec, eps_lists, _config(args))
    _write_report(args.out, report)
    if args.coupling:
        kern = report.kernel
        write_coupling(args.coupling, kern, kern.coupling_values(state.u_tilde, state.v_tilde))
    return _status(report)


def cmd_barycenter(args) -> int:
    ms = [read_measure(p) for p in args.inputs]
    geom = ms[0].geometry
    if any(m.geometry.shape != geom.shape or m.geometry.spacing != geom.spacing for m in ms):
        raise UsageError("barycenter inputs must share one grid")
    weights = np.array(args.weights if args.weights else [1.0 / len(ms)] * len(ms), dtype=float)
    if weights.size != len(ms):
        raise UsageError("need one weight per input")
    weights = weights / weights.sum()
    specs = barycenter_specs(ms, geom, args.cost, args.wfr_lambda)
    eps_final = parse_eps(args.eps_final, geom.spacing)
    eps_lists = default_eps_lists(specs[0], eps_final, factor=args.eps_factor)
    cfg = _config(args)
    if args.wfr_lambda is None:
        res = solve_barycenter(specs, weights, eps_lists, cfg)
    else:
        res = solve_wfr_barycenter(specs, weights, args.wfr_lambda, eps_lists, cfg)
    write_measure(args.output, res.barycenter, geom)
    _write_report(args.out, res.report)
    return _status(res.report)


def cmd_flow(args) -> int:
    mu0 = read_measure(args.mu0)
    geom = mu0.geometry
    if args.potential:
        pot = read_measure_values(args.potential, geom.size)
    else:
        pot = np.zeros(geom.size)
    eps = parse_eps(args.eps, geom.spacing)
    cfg = _config(args)
    if cfg.stop_rule is None:
        cfg.stop_rule = PrimalDualGap(1e-9)
    frames, reports = gradient_flow(geom, mu0, eps, args.step, pot, args.steps, cfg)
    os.makedirs(args.outdir, exist_ok=True)
    for k, fr in enumerate(frames):
        write_measure(os.path.join(args.outdir, f"frame_{k:04d}.csv"), fr, geom)
    summary = [r.to_dict() for r in reports]
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)
    return 0 if all(r.converged for r in reports) else 2


def read_measure_values(path, size) -> np.ndarray:
    """Values in measure-file layout; ``inf`` marks barrier cells."""
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    vals = []
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            vals.append(float(s))
        except ValueError:
            raise UsageError(f"{path}:{lineno}: not a number: {s!r}") from None
    if len(vals) != size:
        raise UsageError(f"{path}: expected {size} values, found {len(vals)}")
    return np.array(vals)


def cmd_auction(args) -> int:
    try:
        cost = load_cost_matrix(args.cost_matrix).table
    except OSError as exc:
        raise UsageError(f"{args.cost_matrix}: {exc.strerror}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        res = auction_solve(cost, args.eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = dict(assignment=res.assignment.tolist(), alpha=res.alpha.tolist(), beta=res.beta.tolist(),
               iterations=res.iterations, bids=res.bids,
               cost=float(cost[np.arange(cost.shape[0]), res.assignment].sum()))
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_bench(args) -> int:
    mu = read_measure(args.mu)
    nu = read_measure(args.nu)
    if args.cost_matrix:
        try:
            c = load_cost_matrix(args.cost_matrix).table
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        c = make_cost(args.cost, mu.geometry, nu.geometry).matrix()
    h = max(mu.geometry.spacing, nu.geometry.spacing)
    grid = [parse_eps(e, h) for e in args.eps_grid]
    cfg = _config(args)
    if cfg.stop_rule is None:
        cfg.stop_rule = LInfMarginal(1e-6)
    study = iteration_scaling_study(mu.weights, nu.weights, c, grid, cfg.stop_rule,
                                    eps_scaling_factor=args.eps_scaling, config=cfg)
    study.write_csv(args.output)
    print(f"slope {study.slope:.4f}")
    return 0


# ----------------------------------------------------------------------------
# parser

def _eps_arg(text):
    s = text.strip()
    float(s[:-2] if s.endswith("h2") else s)
    return s


def _solver_flags(p):
    p.add_argument("--config", help="key=value file supplying defaults for these options")
    p.add_argument("--theta", type=float, default=1e-20, help="truncation threshold")
    p.add_argument("--tau", type=float, default=1e2, help="absorption bound")
    p.add_argument("--max-iter", type=int, default=100000, help="iteration cap per eps")
    p.add_argument("--absorb-every", type=int, default=1, help="absorption check stride")
    p.add_argument("--stop", choices=["linf", "gap"], default=None, help="stopping rule")
    p.add_argument("--tol", type=float, default=None, help="stopping tolerance")
    p.add_argument("--out", default=None, help="JSON report path (stdout if omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scalingot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="transport between two measures")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--cost", choices=["sqeuclid", "wfr", "matrix"], default="sqeuclid")
    p.add_argument("--cost-matrix", default=None)
    p.add_argument("--lam", type=float, default=None, help="KL fidelity weight (unbalanced)")
    p.add_argument("--eps-final", type=_eps_arg, default="0.1h2", help="final eps; suffix h2 allowed")
    p.add_argument("--eps-factor", type=float, default=2.0)
    p.add_argument("--single-level", action="store_true", help="do not use coarse levels")
    p.add_argument("--coupling", default=None, help="write 'row col value' triples here")
    _solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("barycenter", help="barycenter of measures on one grid")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float, default=None)
    p.add_argument("--cost", choices=["sqeuclid", "wfr"], default="sqeuclid")
    p.add_argument("--wfr-lambda", type=float, default=None, help="KL fidelity weight")
    p.add_argument("--eps-final", type=_eps_arg, default="0.5h2")
    p.add_argument("--eps-factor", type=float, default=2.0)
    p.add_argument("--output", required=True, help="barycenter measure file")
    _solver_flags(p)
    p.set_defaults(func=cmd_barycenter)

    p = sub.add_parser("flow", help="porous-medium gradient flow by JKO steps")
    p.add_argument("--mu0", required=True)
    p.add_argument("--potential", default=None, help="values per cell; inf marks barriers")
    p.add_argument("--step", type=float, required=True, help="time step tau")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--eps", type=_eps_arg, default="1h2")
    p.add_argument("--outdir", required=True)
    _solver_flags(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("auction", help="auction algorithm for an assignment problem")
    p.add_argument("--cost-matrix", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_auction)

    p = sub.add_parser("bench", help="iterations versus eps table")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--cost", choices=["sqeuclid", "wfr"], default="sqeuclid")
    p.add_argument("--cost-matrix", default=None)
    p.add_argument("--eps-grid", nargs="+", type=_eps_arg, required=True)
    p.add_argument("--eps-scaling", type=float, default=None, help="ladder factor; cold start if omitted")
    p.add_argument("--output", required=True, help="CSV table path")
    _solver_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _apply_config(args, sub, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"scalingot: error: {exc}", file=sys.stderr)
        return 1
    except (StarvationError, DivergedError) as exc:
        print(f"scalingot: solve failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"scalingot: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
