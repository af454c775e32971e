"""
Command-line entry point.

    cfasign gen --model m.txt --n 200 --seed 1 [--ordinal] [--out d.csv]
    cfasign fit --model m.txt --data d.csv --identify fixvar|anchor=F.x1
                [--starts V | --per-start F.x=V ...] [--bound F.x:LO:HI ...] [--categorical]
    cfasign simulate --condition 1 --runs m1 m2:+1 sol3:match --reps 500 --n 200 --seed 7 --out t.csv

Exit status: 0 success, 1 usage error, 2 runtime or estimation error
(including a fit that did not converge).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

import numpy as np
from scipy.special import ndtri

from . import __version__
from .categorical import fit_dwls, polychoric_matrix
from .datagen import Dataset, ThresholdSet, discretize_to_ordinal, generate_continuous, read_csv, sample_covariance, write_csv
from .estimate_ml import EngineDefault, FitOptions, PerLoading, UniformLoading, fit_ml
from .exceptions import CfaError
from .model import (
    Indicator,
    IdentificationStrategy,
    ModelSpec,
    build_parameter_layout,
    parse_model_text,
)
from .sign_tools import solution1
from .simulation import Ordinal, SimulationConfig, emit_dcr_table, run_simulation, write_manifest

GRAMMAR_VERSION = "1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _loading_key(text: str) -> tuple:
    f, dot, x = text.partition(".")
    if not dot or not f or not x:
        raise UsageError(f"expected FACTOR.INDICATOR, got {text!r}")
    return f, x


def _read_model(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_model_text(fh.read())


def population_from_spec(spec: ModelSpec):
    """
    Layout and parameter vector describing the population in a model file.

    Loadings take their fixed value or, failing that, their start value.
    Factor variances come from ``fixvar`` (default 1), factor covariances
    from ``fixcov`` (default 0), residual variances from ``fixres`` or
    ``1 - diag(Lambda Phi Lambda')``. Intercepts are 0.
    """
    values = {}
    for key, fixed in spec.loadings.items():
        v = fixed if fixed is not None else spec.loading_starts.get(key)
        if v is None:
            raise CfaError(f"population value missing for loading {'.'.join(key)} (use fix or start)")
        values[key] = v
    layout = build_parameter_layout(spec, IdentificationStrategy.fixed_variance(), UniformLoading(0.0))
    lam = np.zeros((len(spec.indicators), len(spec.factors)))
    names = spec.indicator_names
    for (f, x), v in values.items():
        lam[names.index(x), spec.factors.index(f)] = v
    phi = np.eye(len(spec.factors))
    for i, f in enumerate(spec.factors):
        phi[i, i] = spec.factor_variances.get(f) or 1.0
    for (f, g), v in spec.factor_covariances.items():
        i, j = spec.factors.index(f), spec.factors.index(g)
        phi[i, j] = phi[j, i] = v or 0.0
    common = np.diag(lam @ phi @ lam.T)
    theta = np.zeros(layout.n_free)
    for k, e in enumerate(layout.free_entries):
        if e.role == "loading":
            theta[k] = values[e.address]
        elif e.role == "factor_covariance":
            f, g = e.address
            theta[k] = phi[spec.factors.index(f), spec.factors.index(g)]
        elif e.role == "residual_variance":
            theta[k] = 1.0 - common[names.index(e.address[0])]
        elif e.role == "factor_variance":
            i = spec.factors.index(e.address[0])
            theta[k] = phi[i, i]
    return layout, theta


def _equal_probability_thresholds(categories: int) -> tuple:
    return tuple(float(ndtri(c / categories)) for c in range(1, categories))


def cmd_gen(args, out, err) -> int:
    spec = _read_model(args.model)
    layout, theta = population_from_spec(spec)
    data = generate_continuous(layout, theta, args.n, args.seed)
    if args.ordinal:
        thr = [_equal_probability_thresholds(ind.categories if ind.is_ordinal else 2) for ind in spec.indicators]
        data = discretize_to_ordinal(data, ThresholdSet(data.variables, tuple(thr)))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_csv(data, fh)
    else:
        write_csv(data, out)
    return 0


def _categorical_spec(spec: ModelSpec, data) -> ModelSpec:
    inds = []
    for ind in spec.indicators:
        if ind.is_ordinal:
            inds.append(ind)
        else:
            col = data.column(ind.name)
            inds.append(Indicator(ind.name, "ordinal", int(col.max()) + 1))
    return replace(spec, indicators=tuple(inds))


def cmd_fit(args, out, err) -> int:
    spec = _read_model(args.model)
    data = read_csv(args.data)
    missing = [x for x in spec.indicator_names if x not in data.variables]
    if missing:
        raise CfaError(f"data file lacks columns {missing}")
    order = [data.variables.index(x) for x in spec.indicator_names]

    if args.identify == "fixvar":
        strategy = IdentificationStrategy.fixed_variance()
    elif args.identify.startswith("anchor="):
        # a start on the anchor is a population value for gen; drop it here
        spec, strategy = solution1(spec, _loading_key(args.identify[len("anchor="):]))
    else:
        raise UsageError(f"--identify must be fixvar or anchor=F.x, got {args.identify!r}")

    if args.starts is not None and args.per_start:
        raise UsageError("--starts and --per-start are mutually exclusive")
    if args.starts is not None:
        policy = UniformLoading(args.starts)
    elif args.per_start:
        values = {}
        for item in args.per_start:
            key, eq, v = item.partition("=")
            if not eq:
                raise UsageError(f"--per-start expects F.x=V, got {item!r}")
            values[_loading_key(key)] = float(v)
        policy = PerLoading(values)
    else:
        policy = EngineDefault()
    if args.starts is not None or args.per_start:
        # command-line starts override start lines in the model file
        spec = replace(spec, loading_starts={})

    bounds = {}
    for item in args.bound or []:
        parts = item.split(":")
        if len(parts) != 3:
            raise UsageError(f"--bound expects F.x:LO:HI, got {item!r}")
        lo = float(parts[1]) if parts[1] else -math.inf
        hi = float(parts[2]) if parts[2] else math.inf
        bounds[_loading_key(parts[0])] = (lo, hi)
    if bounds:
        unknown = [k for k in bounds if k not in spec.loadings]
        if unknown:
            raise CfaError(f"--bound on unknown loading {'.'.join(unknown[0])}")
        spec = spec.with_loading_bounds(bounds)

    options = FitOptions(start_policy=policy, max_iterations=args.max_iterations)
    x = np.asarray(data.values, dtype=float)[:, order]
    if args.categorical:
        if not np.all(x == np.round(x)) or x.min() < 0:
            raise CfaError("categorical fit needs non-negative integer codes")
        spec = _categorical_spec(spec, data)
        sub = Dataset(x.astype(np.int64), tuple(spec.indicator_names),
                      tuple(ind.categories for ind in spec.indicators))
        fit = fit_dwls(spec, polychoric_matrix(sub), options, strategy)
    else:
        sub = Dataset(x, tuple(spec.indicator_names), (None,) * len(order))
        fit = fit_ml(spec, strategy, sample_covariance(sub), sub.n, options, means=x.mean(axis=0))

    out.write(format_loading_table(fit))
    err.write(f"method: {fit.method}\ndiscrepancy: {fit.discrepancy:.10g}\n"
              f"iterations: {fit.iterations}\nconverged: {str(fit.converged).lower()}\n")
    if not fit.converged:
        err.write(f"fit did not converge: {fit.message} "
                  f"(projected gradient {fit.gradient_inf_norm:.3g})\n")
        return 2
    return 0


def format_loading_table(fit) -> str:
    multi = len(fit.layout.factors) > 1
    rows = []
    for e in fit.layout.loading_entries:
        f, x = e.address
        item = f"{f}.{x}" if multi else x
        rows.append((item, f"{fit.estimates[('loading', e.address)]:.4f}", "" if e.free else "fixed"))
    width = max(len("item"), *(len(r[0]) for r in rows))
    lines = [f"{'item':<{width}}  estimate"]
    lines += [f"{item:<{width}}  {est:>8}" + (f"  {note}" if note else "") for item, est, note in rows]
    return "\n".join(lines) + "\n"


def cmd_simulate(args, out, err) -> int:
    runs = [tok for item in args.runs for tok in item.split(",") if tok]
    kind = "continuous" if args.ordinal is None else Ordinal(args.ordinal, _equal_probability_thresholds(args.ordinal))
    config = SimulationConfig.for_condition(args.condition, runs, n=args.n, replicates=args.reps,
                                            base_seed=args.seed, data_kind=kind)
    table = run_simulation(config, workers=args.workers)
    with open(args.out, "wb") as fh:
        emit_dcr_table(table, fh)
    manifest = args.manifest or args.out + ".manifest.txt"
    with open(manifest, "w", encoding="utf-8") as fh:
        write_manifest(table, fh)
    for run in table.runs:
        if run.failed:
            err.write(f"run {run.label}: {run.failed} replicate(s) did not converge and were excluded\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfasign", description="Factor-loading sign behaviour in CFA.")
    parser.add_argument("--version", action="store_true", help="print engine and model-grammar version")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset from a population model file")
    g.add_argument("--model", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--ordinal", action="store_true", help="discretize at equal-probability thresholds")
    g.add_argument("--out")

    f = sub.add_parser("fit", help="fit a model to one dataset")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--identify", default="fixvar", help="fixvar or anchor=F.x")
    f.add_argument("--starts", type=float, help="start value for every free loading (overrides model-file starts)")
    f.add_argument("--per-start", action="append", metavar="F.x=V")
    f.add_argument("--bound", action="append", metavar="F.x:LO:HI")
    f.add_argument("--categorical", action="store_true", help="polychoric + DWLS instead of ML")
    f.add_argument("--max-iterations", type=int, default=1000)

    s = sub.add_parser("simulate", help="replicate one sign condition and write a DCR table")
    s.add_argument("--condition", type=int, choices=[1, 2, 3, 4], required=True)
    s.add_argument("--runs", nargs="+", required=True, metavar="RUNSPEC")
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest")
    s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    s.add_argument("--ordinal", type=int, metavar="C", help="discretize into C equal-probability categories")
    return parser


def run_cli(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            out.write(f"cfasign {__version__} (model grammar {GRAMMAR_VERSION})\n")
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required (gen, fit, simulate)")
        handler = {"gen": cmd_gen, "fit": cmd_fit, "simulate": cmd_simulate}[args.command]
        return handler(args, out, err)
    except UsageError as exc:
        err.write(f"{exc}\n")
        return 1
    except (OSError, CfaError, ValueError) as exc:
        err.write(f"error: {exc}\n")
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
