"""
Monte Carlo harness: replicate datasets from a one-factor population, fit
each under several identification/start/bound settings, and tabulate how
often every loading estimate carries the sign of its true value.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .categorical import fit_dwls, polychoric_matrix
from .datagen import ThresholdSet, discretize_to_ordinal, generate_continuous, replicate_seed, sample_covariance
from .estimate_ml import EngineDefault, FitOptions, PerLoading, UniformLoading, fit_ml, population_layout
from .exceptions import CfaError, ModelError
from .model import IdentificationStrategy, implied_covariance, one_factor_spec
from .sign_tools import DcrRecord, FlipClass, anchor_reorder, classify_flip, dcr

__all__ = [
    "RunSpec",
    "Ordinal",
    "SimulationConfig",
    "DcrTable",
    "SimulationError",
    "make_condition",
    "parse_runspec",
    "run_simulation",
    "exact_fit_classes",
    "emit_dcr_table",
    "write_manifest",
]

CONDITIONS = {
    1: (0.7, 0.7, 0.7),
    2: (-0.7, -0.7, -0.7),
    3: (-0.7, 0.7, 0.7),
    4: (-0.7, -0.7, 0.7),
}


class SimulationError(CfaError, RuntimeError):
    pass


def make_condition(condition_id: int, magnitude: float = 0.7) -> tuple:
    """True loading vector of one of the four sign conditions."""
    if condition_id not in CONDITIONS:
        raise ValueError(f"condition must be 1..4, got {condition_id}")
    return tuple(math.copysign(magnitude, v) for v in CONDITIONS[condition_id])


@dataclass(frozen=True)
class RunSpec:
    """
    One fitting setup applied to every replicate.

    ``anchor`` names the indicator whose loading is fixed at 1 (factor
    variance then free); otherwise the factor variance is fixed at 1.
    ``start`` is ``"default"``, ``"match"`` (``+-1`` following the true
    signs) or a number used for every free loading. ``bound`` is
    ``"lb0"`` or ``"ub0"`` applied to all loadings.
    """

    label: str
    anchor: Optional[str] = None
    start: object = "default"
    bound: Optional[str] = None

    def __post_init__(self):
        if self.bound not in (None, "lb0", "ub0"):
            raise ModelError(f"unknown bound setting {self.bound!r}")
        if not (self.start in ("default", "match") or isinstance(self.start, (int, float))):
            raise ModelError(f"unknown start setting {self.start!r}")

    def resolve(self, spec, truth):
        """``(spec, strategy, options)`` for a single-factor spec with true loadings ``truth``."""
        factor = spec.factors[0]
        names = spec.factor_indicators(factor)
        if self.anchor is not None:
            if self.anchor not in names:
                raise ModelError(f"unknown anchor {factor}.{self.anchor}")
            spec = anchor_reorder(spec, (factor, self.anchor))
            strategy = IdentificationStrategy.fixed_anchor((factor, self.anchor))
        else:
            strategy = IdentificationStrategy.fixed_variance()
        if self.bound is not None:
            lim = (0.0, math.inf) if self.bound == "lb0" else (-math.inf, 0.0)
            spec = spec.with_loading_bounds({(factor, x): lim for x in names if spec.loadings[(factor, x)] is None})
        if self.start == "match":
            policy = PerLoading.matching_signs(spec, {(factor, x): t for x, t in zip(names, truth)})
        elif self.start == "default":
            policy = EngineDefault()
        else:
            policy = UniformLoading(float(self.start))
        return spec, strategy, FitOptions(start_policy=policy)


def parse_runspec(token: str, factor: str = "F") -> RunSpec:
    """
    Parse the run mini-syntax.

    ``m1`` engine-default starts, ``m2:+1`` / ``m3:-1`` uniform starts,
    ``m4`` first loading fixed at 1, ``sol1:F.x`` (or ``sol1`` for the last
    indicator) anchor, ``sol2:lb0`` / ``sol2:ub0`` bounds, ``sol3:+1`` /
    ``sol3:-1`` uniform starts, ``sol3:match`` starts following true signs.
    """
    token = token.strip()
    head, _, arg = token.partition(":")
    try:
        if head == "m1" and not arg:
            return RunSpec(token)
        if head in ("m2", "m3", "sol3") and arg:
            if head == "sol3" and arg == "match":
                return RunSpec(token, start="match")
            return RunSpec(token, start=float(arg))
        if head == "m2":
            return RunSpec(token, start=1.0)
        if head == "m3":
            return RunSpec(token, start=-1.0)
        if head == "m4" and not arg:
            return RunSpec(token, anchor="@first")
        if head == "sol1":
            if not arg:
                return RunSpec(token, anchor="@last")
            f, dot, x = arg.partition(".")
            if not dot or f != factor or not x:
                raise ValueError
            return RunSpec(token, anchor=x)
        if head == "sol2" and arg in ("lb0", "ub0"):
            return RunSpec(token, bound=arg)
        if head == "sol3" and not arg:
            return RunSpec(token, start="match")
    except ValueError:
        pass
    raise ModelError(f"cannot parse run spec {token!r}")


@dataclass(frozen=True)
class Ordinal:
    categories: int = 2
    thresholds: tuple = (0.0,)

    def __post_init__(self):
        if len(self.thresholds) != self.categories - 1:
            raise ModelError(f"{len(self.thresholds)} thresholds for {self.categories} categories")


@dataclass(frozen=True)
class SimulationConfig:
    condition: tuple
    runs: tuple
    n: int = 200
    replicates: int = 500
    base_seed: int = 0
    data_kind: object = "continuous"
    condition_label: str = ""

    def __post_init__(self):
        if self.replicates < 1:
            raise SimulationError("replicates must be at least 1")
        if self.n < 2:
            raise SimulationError("sample size must be at least 2")
        if not self.runs:
            raise SimulationError("no runs configured")
        if any(v == 0 for v in self.condition):
            raise SimulationError("true loadings must be non-zero")
        labels = [r.label for r in self.runs]
        if len(set(labels)) != len(labels):
            raise SimulationError("run labels must be unique")
        if self.data_kind != "continuous" and not isinstance(self.data_kind, Ordinal):
            raise SimulationError(f"unknown data kind {self.data_kind!r}")

    @classmethod
    def for_condition(cls, condition_id: int, runs: Sequence, **kw) -> "SimulationConfig":
        runs = tuple(parse_runspec(r) if isinstance(r, str) else r for r in runs)
        return cls(make_condition(condition_id), runs, condition_label=str(condition_id), **kw)

    @property
    def label(self) -> str:
        return self.condition_label or " ".join(f"{v:g}" for v in self.condition)

    def model(self):
        p = len(self.condition)
        cats = self.data_kind.categories if isinstance(self.data_kind, Ordinal) else None
        return one_factor_spec(p, categories=cats)

    def resolved_runs(self) -> list:
        spec = self.model()
        names = spec.indicator_names
        out = []
        for run in self.runs:
            if run.anchor == "@first":
                run = RunSpec(run.label, names[0], run.start, run.bound)
            elif run.anchor == "@last":
                run = RunSpec(run.label, names[-1], run.start, run.bound)
            out.append((run, *run.resolve(spec, self.condition)))
        return out


@dataclass
class RunSummary:
    label: str
    records: list
    converged: int
    failed: int
    flips: Counter
    bound_violations: int


@dataclass
class DcrTable:
    config: SimulationConfig
    runs: list

    @property
    def rows(self) -> list:
        return [(run.label, rec) for run in self.runs for rec in run.records]

    def record(self, label: str, index: int) -> DcrRecord:
        for lab, rec in self.rows:
            if lab == label and rec.index == index:
                return rec
        raise KeyError((label, index))

    def dcr_values(self, label: str) -> list:
        return [rec.dcr for lab, rec in self.rows if lab == label]

    def run(self, label: str) -> RunSummary:
        for r in self.runs:
            if r.label == label:
                return r
        raise KeyError(label)


def _fit_replicate(config: SimulationConfig, resolved, r: int):
    truth = np.asarray(config.condition)
    spec0 = config.model()
    layout, theta = population_layout(spec0, truth)
    data = generate_continuous(layout, theta, config.n, replicate_seed(config.base_seed, r))
    if isinstance(config.data_kind, Ordinal):
        thr = ThresholdSet.uniform(data.variables, config.data_kind.thresholds)
        data = discretize_to_ordinal(data, thr)
        try:
            target = polychoric_matrix(data)
        except CfaError:
            return [None] * len(resolved)
    else:
        S = sample_covariance(data)
        means = data.values.mean(axis=0)

    out = []
    for run, spec, strategy, options in resolved:
        try:
            if isinstance(config.data_kind, Ordinal):
                fit = fit_dwls(spec, target, options, strategy)
            else:
                fit = fit_ml(spec, strategy, S, config.n, options, means=means)
        except CfaError:
            out.append(None)
            continue
        lam = fit.loading_vector()
        violations = 0
        for e in fit.layout.loading_entries:
            v = fit.estimates[("loading", e.address)]
            if e.free and not (e.lower <= v <= e.upper):
                violations += 1
        out.append((fit.converged, lam, fit.free_loading_mask(), violations))
    return out


def _fit_chunk(args):
    config, indices = args
    resolved = config.resolved_runs()
    return [(r, _fit_replicate(config, resolved, r)) for r in indices]


def run_simulation(config: SimulationConfig, workers: Optional[int] = 1) -> DcrTable:
    """
    Fit every run to every replicate and tabulate directional consistency.

    Replicate ``r`` uses seed ``base_seed ^ r`` and all runs see the same
    dataset. Non-converged fits are left out of M and N and counted.
    Results do not depend on ``workers`` (``None`` uses all CPUs).
    """
    resolved = config.resolved_runs()
    reps = list(range(config.replicates))
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or config.replicates < 2:
        results = _fit_chunk((config, reps))
    else:
        size = max(1, math.ceil(len(reps) / (workers * 4)))
        chunks = [(config, reps[i:i + size]) for i in range(0, len(reps), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [item for part in pool.map(_fit_chunk, chunks) for item in part]
    results.sort(key=lambda item: item[0])

    truth = np.asarray(config.condition)
    runs = []
    for k, (run, *_rest) in enumerate(resolved):
        estimates, flips, failed, violations, mask = [], Counter(), 0, 0, None
        for _, per_run in results:
            res = per_run[k]
            if res is None or not res[0]:
                failed += 1
                continue
            _, lam, mask, viol = res
            estimates.append(lam)
            flips[classify_flip(lam, truth, mask).value] += 1
            violations += viol
        if not estimates:
            raise SimulationError(f"run {run.label}: no replicate converged")
        records = dcr(estimates, truth, mask)
        runs.append(RunSummary(run.label, records, len(estimates), failed, flips, violations))
    return DcrTable(config, runs)


def exact_fit_classes(config: SimulationConfig) -> dict:
    """Flip class of each run when fitted to the population covariance itself."""
    truth = np.asarray(config.condition)
    layout, theta = population_layout(config.model(), truth)
    sigma = implied_covariance(layout, theta)
    out = {}
    for run, spec, strategy, options in config.resolved_runs():
        fit = fit_ml(spec, strategy, sigma, config.n, options)
        out[run.label] = classify_flip(fit.loading_vector(), truth, fit.free_loading_mask())
    return out


HEADER = ["condition", "method", "loading", "truth", "M", "N", "dcr"]


def dcr_table_text(table: DcrTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for label, rec in table.rows:
        w.writerow([table.config.label, label, rec.index + 1, f"{rec.truth:g}", rec.M, rec.N, f"{rec.dcr:.1f}"])
    return buf.getvalue()


def emit_dcr_table(table: DcrTable, destination) -> int:
    """Write the table as CSV; returns the number of bytes written."""
    if not table.runs:
        raise SimulationError("table has no runs")
    data = dcr_table_text(table).encode("utf-8")
    if hasattr(destination, "buffer"):
        destination.flush()
        destination.buffer.write(data)
        destination.buffer.flush()
    elif isinstance(destination, io.TextIOBase):
        destination.write(data.decode("utf-8"))
    else:
        destination.write(data)
    return len(data)


def write_manifest(table: DcrTable, stream) -> None:
    """Plain-text provenance: engine version, configuration, convergence and flip counts."""
    cfg = table.config
    kind = cfg.data_kind if cfg.data_kind == "continuous" else (
        f"ordinal categories={cfg.data_kind.categories} thresholds={list(cfg.data_kind.thresholds)}")
    lines = [
        f"engine: cfasign {__version__}",
        f"condition: {cfg.label}",
        f"true_loadings: {' '.join(f'{v:g}' for v in cfg.condition)}",
        f"n: {cfg.n}",
        f"replicates: {cfg.replicates}",
        f"base_seed: {cfg.base_seed}",
        "replicate_seed: base_seed XOR replicate_index",
        f"data: {kind}",
    ]
    for run in table.runs:
        flips = " ".join(f"{c.value}={run.flips.get(c.value, 0)}" for c in FlipClass)
        lines.append(
            f"run {run.label}: converged={run.converged} failed={run.failed} "
            f"bound_violations={run.bound_violations} {flips}"
        )
    stream.write("\n".join(lines) + "\n")
