"""
Declarative factor-model specifications, identification and parameter layout.

A model is written one statement per line::

    F =~ x1 + x2 + x3        # loadings of F
    fix F.x1 = 1             # fixed loading
    start F.x2 = -1          # loading start value
    bound F.x3 lower 0       # loading bound (lower | upper)
    fixvar F = 1             # fixed factor variance
    fixcov F G = 0           # fixed factor covariance
    fixres x2 = 0.51         # fixed residual variance
    ordinal x3 2             # ordinal indicator with 2 categories

Everything not fixed is free. Loading starts and bounds are only
meaningful for free loadings.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

from .exceptions import EstimationError, ModelError, ModelSyntaxError

__all__ = [
    "Indicator",
    "ModelSpec",
    "one_factor_spec",
    "Diagnostic",
    "IdentificationStrategy",
    "LayoutEntry",
    "ParameterLayout",
    "parse_model_text",
    "format_model",
    "validate_spec",
    "build_parameter_layout",
    "implied_covariance",
]

CONTINUOUS = "continuous"
ORDINAL = "ordinal"

#: implicit lower bound keeping variance parameters strictly positive
VARIANCE_FLOOR = 1e-6

ROLES = ("loading", "factor_variance", "factor_covariance", "residual_variance", "intercept")


@dataclass(frozen=True)
class Indicator:
    name: str
    kind: str = CONTINUOUS
    categories: Optional[int] = None

    @property
    def is_ordinal(self) -> bool:
        return self.kind == ORDINAL


@dataclass(frozen=True)
class ModelSpec:
    """
    Factor model specification.

    Status maps hold ``None`` for a free parameter and a float for a fixed
    one. Instances are treated as immutable; use :func:`dataclasses.replace`
    (or the ``with_*`` helpers) to derive modified copies.
    """

    factors: tuple
    indicators: tuple
    loadings: Mapping[tuple, Optional[float]]
    factor_variances: Mapping[str, Optional[float]] = field(default_factory=dict)
    factor_covariances: Mapping[tuple, Optional[float]] = field(default_factory=dict)
    residual_variances: Mapping[str, Optional[float]] = field(default_factory=dict)
    intercepts: Mapping[str, Optional[float]] = field(default_factory=dict)
    loading_starts: Mapping[tuple, float] = field(default_factory=dict)
    loading_bounds: Mapping[tuple, tuple] = field(default_factory=dict)

    @property
    def indicator_names(self) -> list:
        return [ind.name for ind in self.indicators]

    def indicator(self, name: str) -> Indicator:
        for ind in self.indicators:
            if ind.name == name:
                return ind
        raise KeyError(name)

    def factor_indicators(self, factor: str) -> list:
        """Indicators loading on ``factor``, in indicator order."""
        return [x for x in self.indicator_names if (factor, x) in self.loadings]

    @property
    def all_ordinal(self) -> bool:
        return all(ind.is_ordinal for ind in self.indicators)

    def with_loading_bounds(self, bounds: Mapping[tuple, tuple]) -> "ModelSpec":
        merged = dict(self.loading_bounds)
        merged.update(bounds)
        return replace(self, loading_bounds=merged)

    def with_loading_starts(self, starts: Mapping[tuple, float]) -> "ModelSpec":
        merged = dict(self.loading_starts)
        merged.update(starts)
        return replace(self, loading_starts=merged)


def one_factor_spec(n_indicators: int = 3, factor: str = "F", prefix: str = "x",
                    categories: Optional[int] = None) -> ModelSpec:
    """Single-factor spec with indicators ``x1..xp``, everything free."""
    names = [f"{prefix}{i + 1}" for i in range(n_indicators)]
    text = f"{factor} =~ " + " + ".join(names)
    if categories is not None:
        text += "".join(f"\nordinal {x} {categories}" for x in names)
    return parse_model_text(text)


# -- parsing -----------------------------------------------------------------

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NUM = r"[-+]?(?:inf|(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
_PATTERNS = {
    "measure": re.compile(rf"^({_NAME})\s*=~\s*(.+)$"),
    "fix": re.compile(rf"^fix\s+({_NAME})\.({_NAME})\s*=\s*({_NUM})$"),
    "start": re.compile(rf"^start\s+({_NAME})\.({_NAME})\s*=\s*({_NUM})$"),
    "bound": re.compile(rf"^bound\s+({_NAME})\.({_NAME})\s+(lower|upper)\s+({_NUM})$"),
    "fixvar": re.compile(rf"^fixvar\s+({_NAME})\s*=\s*({_NUM})$"),
    "fixcov": re.compile(rf"^fixcov\s+({_NAME})\s+({_NAME})\s*=\s*({_NUM})$"),
    "fixres": re.compile(rf"^fixres\s+({_NAME})\s*=\s*({_NUM})$"),
    "ordinal": re.compile(rf"^ordinal\s+({_NAME})\s+(\d+)$"),
}
_TERM = re.compile(rf"^{_NAME}$")


def parse_model_text(text: str) -> ModelSpec:
    """
    Parse model source into a validated :class:`ModelSpec`.

    Raises
    ------
    ModelSyntaxError
        Malformed statement, unknown variable reference, duplicate
        directive or inverted bound; carries the 1-based line number.
    """
    if not text or not text.strip():
        raise ModelSyntaxError("empty model text", line=0)

    factors: list = []
    indicators: list = []
    loadings: dict = {}
    directives: list = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _PATTERNS["measure"].match(line)
        if m:
            factor, rhs = m.group(1), m.group(2)
            terms = [t.strip() for t in rhs.split("+")]
            if any(not _TERM.match(t) for t in terms):
                raise ModelSyntaxError(f"malformed loading list {rhs!r}", line=lineno)
            if factor not in factors:
                factors.append(factor)
            for x in terms:
                if (factor, x) in loadings:
                    raise ModelSyntaxError(f"duplicate loading {factor}.{x}", line=lineno)
                loadings[(factor, x)] = None
                if x not in indicators:
                    indicators.append(x)
            continue
        for kind, pattern in _PATTERNS.items():
            if kind == "measure":
                continue
            m = pattern.match(line)
            if m:
                directives.append((lineno, kind, m.groups()))
                break
        else:
            raise ModelSyntaxError(f"cannot parse statement {line!r}", line=lineno)

    overlap = set(factors) & set(indicators)
    if overlap:
        raise ModelSyntaxError(f"names used as both factor and indicator: {sorted(overlap)}", line=0)

    fixed_loadings: dict = {}
    starts: dict = {}
    bounds: dict = {}
    fixvar: dict = {}
    fixcov: dict = {}
    fixres: dict = {}
    ordinal: dict = {}
    seen: set = set()

    def check_loading(lineno, f, x):
        if (f, x) not in loadings:
            raise ModelSyntaxError(f"unknown loading {f}.{x}", line=lineno)

    for lineno, kind, groups in directives:
        key = (kind,) + groups[:-1] if kind != "ordinal" else (kind, groups[0])
        if key in seen:
            raise ModelSyntaxError(f"duplicate directive {' '.join(key)}", line=lineno)
        seen.add(key)
        if kind == "fix":
            f, x, v = groups
            check_loading(lineno, f, x)
            fixed_loadings[(f, x)] = float(v)
        elif kind == "start":
            f, x, v = groups
            check_loading(lineno, f, x)
            starts[(f, x)] = float(v)
        elif kind == "bound":
            f, x, side, v = groups
            check_loading(lineno, f, x)
            lo, hi = bounds.get((f, x), (-math.inf, math.inf))
            if side == "lower":
                lo = float(v)
            else:
                hi = float(v)
            if lo > hi:
                raise ModelSyntaxError(f"bound on {f}.{x} has lower {lo} > upper {hi}", line=lineno)
            bounds[(f, x)] = (lo, hi)
        elif kind == "fixvar":
            f, v = groups
            if f not in factors:
                raise ModelSyntaxError(f"unknown factor {f}", line=lineno)
            fixvar[f] = float(v)
        elif kind == "fixcov":
            f, g, v = groups
            for name in (f, g):
                if name not in factors:
                    raise ModelSyntaxError(f"unknown factor {name}", line=lineno)
            if f == g:
                raise ModelSyntaxError("use fixvar for a factor variance", line=lineno)
            pair = _factor_pair(factors, f, g)
            if pair in fixcov:
                raise ModelSyntaxError(f"duplicate directive fixcov {f} {g}", line=lineno)
            fixcov[pair] = float(v)
        elif kind == "fixres":
            x, v = groups
            if x not in indicators:
                raise ModelSyntaxError(f"unknown indicator {x}", line=lineno)
            fixres[x] = float(v)
        elif kind == "ordinal":
            x, c = groups
            if x not in indicators:
                raise ModelSyntaxError(f"unknown indicator {x}", line=lineno)
            ordinal[x] = int(c)

    loadings.update(fixed_loadings)
    spec = ModelSpec(
        factors=tuple(factors),
        indicators=tuple(
            Indicator(x, ORDINAL, ordinal[x]) if x in ordinal else Indicator(x)
            for x in indicators
        ),
        loadings=loadings,
        factor_variances={f: fixvar.get(f) for f in factors},
        factor_covariances={
            _factor_pair(factors, f, g): fixcov.get(_factor_pair(factors, f, g))
            for i, f in enumerate(factors) for g in factors[i + 1:]
        },
        residual_variances={x: fixres.get(x) for x in indicators},
        intercepts={x: None for x in indicators},
        loading_starts=starts,
        loading_bounds=bounds,
    )
    problems = validate_spec(spec)
    if problems:
        raise ModelSyntaxError("; ".join(str(p) for p in problems), line=0)
    return spec


def _factor_pair(factors, f, g) -> tuple:
    order = list(factors)
    return (f, g) if order.index(f) < order.index(g) else (g, f)


def _fmt(v: float) -> str:
    return repr(float(v))


def format_model(spec: ModelSpec) -> str:
    """Serialize a spec back into model text (inverse of :func:`parse_model_text`)."""
    lines = []
    for f in spec.factors:
        lines.append(f"{f} =~ " + " + ".join(spec.factor_indicators(f)))
    for (f, x), v in spec.loadings.items():
        if v is not None:
            lines.append(f"fix {f}.{x} = {_fmt(v)}")
    for (f, x), v in spec.loading_starts.items():
        lines.append(f"start {f}.{x} = {_fmt(v)}")
    for (f, x), (lo, hi) in spec.loading_bounds.items():
        if lo != -math.inf:
            lines.append(f"bound {f}.{x} lower {_fmt(lo)}")
        if hi != math.inf:
            lines.append(f"bound {f}.{x} upper {_fmt(hi)}")
    for f, v in spec.factor_variances.items():
        if v is not None:
            lines.append(f"fixvar {f} = {_fmt(v)}")
    for (f, g), v in spec.factor_covariances.items():
        if v is not None:
            lines.append(f"fixcov {f} {g} = {_fmt(v)}")
    for x, v in spec.residual_variances.items():
        if v is not None:
            lines.append(f"fixres {x} = {_fmt(v)}")
    for ind in spec.indicators:
        if ind.is_ordinal:
            lines.append(f"ordinal {ind.name} {ind.categories}")
    return "\n".join(lines) + "\n"


# -- validation ----------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    code: str
    location: str
    message: str

    def __str__(self):
        return f"{self.location}: {self.message}"


def validate_spec(spec: ModelSpec) -> list:
    """Return a list of :class:`Diagnostic`; empty when the model is well formed."""
    out = []
    names = spec.indicator_names
    for x in names:
        if not any((f, x) in spec.loadings for f in spec.factors):
            out.append(Diagnostic("orphan_indicator", x, "indicator loads on no factor"))
    for f in spec.factors:
        if not spec.factor_indicators(f):
            out.append(Diagnostic("empty_factor", f, "factor has no indicators"))
    for (f, x) in spec.loadings:
        if f not in spec.factors or x not in names:
            out.append(Diagnostic("unknown_reference", f"{f}.{x}", "loading references undeclared variable"))
    for key in spec.loading_starts:
        if key not in spec.loadings:
            out.append(Diagnostic("unknown_reference", ".".join(key), "start on undeclared loading"))
        elif spec.loadings[key] is not None:
            out.append(Diagnostic("fixed_with_start", ".".join(key), "fixed parameter has start value"))
    for key, (lo, hi) in spec.loading_bounds.items():
        loc = ".".join(key)
        if key not in spec.loadings:
            out.append(Diagnostic("unknown_reference", loc, "bound on undeclared loading"))
            continue
        if lo > hi:
            out.append(Diagnostic("inverted_bound", loc, f"lower bound {lo} exceeds upper bound {hi}"))
        v = spec.loadings[key]
        if v is not None and not lo <= v <= hi:
            out.append(Diagnostic("fixed_outside_bound", loc, f"fixed value {v} outside [{lo}, {hi}]"))
    for ind in spec.indicators:
        if ind.is_ordinal and (ind.categories is None or ind.categories < 2):
            out.append(Diagnostic("categories", ind.name, "ordinal indicator needs at least 2 categories"))
    return out


# -- identification & layout -----------------------------------------------------

@dataclass(frozen=True)
class IdentificationStrategy:
    """
    Scale-setting rule per factor.

    Factors listed in ``anchors`` use a fixed anchor loading (value 1);
    every other factor uses a fixed factor variance (value 1, mean 0).
    """

    anchors: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def fixed_variance(cls) -> "IdentificationStrategy":
        return cls()

    @classmethod
    def fixed_anchor(cls, *pairs) -> "IdentificationStrategy":
        anchors: dict = {}
        for f, x in pairs:
            if f in anchors:
                raise ModelError(f"two anchors requested for factor {f}")
            anchors[f] = x
        return cls(anchors)

    def variant(self, factor: str) -> str:
        return "anchor" if factor in self.anchors else "fixvar"


@dataclass(frozen=True)
class LayoutEntry:
    role: str
    address: tuple
    start: float
    lower: float = -math.inf
    upper: float = math.inf
    fixed: Optional[float] = None
    user_start: bool = False

    @property
    def free(self) -> bool:
        return self.fixed is None

    @property
    def label(self) -> str:
        if self.role == "loading":
            return "{}.{}".format(*self.address)
        return f"{self.role}:{'.'.join(self.address)}"


@dataclass(frozen=True)
class ParameterLayout:
    """
    Ordered parameter entries for a spec under an identification strategy.

    Free entries, in order, map one-to-one onto positions of the parameter
    vector. Fixed entries carry their value.
    """

    factors: tuple
    indicators: tuple
    entries: tuple
    anchors: Mapping[str, str] = field(default_factory=dict)

    @cached_property
    def free_entries(self) -> tuple:
        return tuple(e for e in self.entries if e.free)

    @property
    def n_free(self) -> int:
        return len(self.free_entries)

    @cached_property
    def index(self) -> dict:
        """(role, address) -> position in the parameter vector."""
        return {(e.role, e.address): k for k, e in enumerate(self.free_entries)}

    def positions(self, role: str) -> np.ndarray:
        return np.array([k for k, e in enumerate(self.free_entries) if e.role == role], dtype=int)

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.free_entries], dtype=float)

    @cached_property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.free_entries], dtype=float)

    @cached_property
    def starts(self) -> np.ndarray:
        return np.array([e.start for e in self.free_entries], dtype=float)

    @cached_property
    def loading_entries(self) -> tuple:
        return tuple(e for e in self.entries if e.role == "loading")

    @cached_property
    def _scatter(self):
        # base matrices with fixed values, plus (target, row, col, theta position) for free ones
        p, m = len(self.indicators), len(self.factors)
        xi = {x: i for i, x in enumerate(self.indicators)}
        fi = {f: i for i, f in enumerate(self.factors)}
        lam, phi, psi = np.zeros((p, m)), np.zeros((m, m)), np.zeros(p)
        lam_free, phi_free, psi_free = [], [], []
        pos = self.index
        for e in self.entries:
            k = pos.get((e.role, e.address))
            if e.role == "loading":
                rc = (xi[e.address[1]], fi[e.address[0]])
                if k is None:
                    lam[rc] = e.fixed
                else:
                    lam_free.append(rc + (k,))
            elif e.role == "factor_variance":
                a = fi[e.address[0]]
                if k is None:
                    phi[a, a] = e.fixed
                else:
                    phi_free.append((a, a, k))
            elif e.role == "factor_covariance":
                a, b = fi[e.address[0]], fi[e.address[1]]
                if k is None:
                    phi[a, b] = phi[b, a] = e.fixed
                else:
                    phi_free.append((a, b, k))
            elif e.role == "residual_variance":
                i = xi[e.address[0]]
                if k is None:
                    psi[i] = e.fixed
                else:
                    psi_free.append((i, k))
        as_arr = lambda rows, w: np.array(rows, dtype=int).reshape(-1, w)
        return lam, phi, psi, as_arr(lam_free, 3), as_arr(phi_free, 3), as_arr(psi_free, 2)

    def matrices(self, theta) -> tuple:
        """Return ``(Lambda, Phi, residual_variances)`` for a parameter vector."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise ModelError(f"parameter vector has length {theta.size}, layout expects {self.n_free}")
        lam0, phi0, psi0, lf, pf, rf = self._scatter
        lam, phi, psi = lam0.copy(), phi0.copy(), psi0.copy()
        if lf.size:
            lam[lf[:, 0], lf[:, 1]] = theta[lf[:, 2]]
        if pf.size:
            phi[pf[:, 0], pf[:, 1]] = theta[pf[:, 2]]
            phi[pf[:, 1], pf[:, 0]] = theta[pf[:, 2]]
        if rf.size:
            psi[rf[:, 0]] = theta[rf[:, 1]]
        return lam, phi, psi

    def chain_rule(self, d_lam: np.ndarray, d_phi: np.ndarray, d_psi: np.ndarray) -> np.ndarray:
        """
        Map matrix-level partial derivatives onto the free parameter vector.

        ``d_phi`` is the derivative with respect to the full symmetric Phi
        treating (a, b) and (b, a) as separate cells.
        """
        _, _, _, lf, pf, rf = self._scatter
        g = np.zeros(self.n_free)
        if lf.size:
            g[lf[:, 2]] = d_lam[lf[:, 0], lf[:, 1]]
        if pf.size:
            a, b = pf[:, 0], pf[:, 1]
            g[pf[:, 2]] = np.where(a == b, d_phi[a, b], d_phi[a, b] + d_phi[b, a])
        if rf.size:
            g[rf[:, 1]] = d_psi[rf[:, 0]]
        return g

    def values(self, theta) -> dict:
        """Resolved value of every entry keyed by ``(role, address)``."""
        theta = np.asarray(theta, dtype=float)
        pos = self.index
        return {
            (e.role, e.address): (float(theta[pos[(e.role, e.address)]]) if e.free else e.fixed)
            for e in self.entries
        }

    def with_starts(self, starts) -> "ParameterLayout":
        starts = np.asarray(starts, dtype=float)
        it = iter(starts)
        entries = tuple(replace(e, start=float(next(it))) if e.free else e for e in self.entries)
        return replace(self, entries=entries)


def build_parameter_layout(spec: ModelSpec, strategy: IdentificationStrategy, start_policy=None) -> ParameterLayout:
    """
    Apply an identification strategy and start policy to a spec.

    Loading starts come from the policy (see
    :mod:`cfasign.estimate_ml` for the policy types) with explicit spec
    starts taking precedence. Variance-type starts are placeholders that
    :func:`cfasign.estimate_ml.default_start_values` refines from data.
    """
    from .estimate_ml import EngineDefault, PerLoading, UniformLoading, ENGINE_DEFAULT_LOADING

    problems = validate_spec(spec)
    if problems:
        raise ModelError("invalid spec: " + "; ".join(map(str, problems)))
    if start_policy is None:
        start_policy = EngineDefault()
    for f, x in strategy.anchors.items():
        if f not in spec.factors:
            raise ModelError(f"unknown anchor {f}.{x}: no factor {f}")
        if (f, x) not in spec.loadings:
            raise ModelError(f"unknown anchor {f}.{x}")
        fixed = spec.loadings[(f, x)]
        if fixed is not None and fixed != 1.0:
            raise ModelError(f"anchor {f}.{x} is already fixed at {fixed}")
        if spec.factor_variances.get(f) is not None:
            raise ModelError(f"factor {f} has both a fixed variance and an anchor loading")
        if (f, x) in spec.loading_starts:
            raise ModelError(f"anchor {f}.{x} has a start value")

    entries = []
    for f in spec.factors:
        for x in spec.factor_indicators(f):
            key = (f, x)
            lo, hi = spec.loading_bounds.get(key, (-math.inf, math.inf))
            fixed = spec.loadings[key]
            if strategy.anchors.get(f) == x:
                fixed = 1.0
            if fixed is not None:
                entries.append(LayoutEntry("loading", key, fixed, lo, hi, fixed=fixed))
                continue
            if key in spec.loading_starts:
                start, user = spec.loading_starts[key], True
            elif isinstance(start_policy, UniformLoading):
                start, user = start_policy.value, False
            elif isinstance(start_policy, PerLoading):
                if key not in start_policy.values:
                    raise ModelError(f"per-loading start policy does not cover {f}.{x}")
                start, user = start_policy.values[key], False
            else:
                start, user = ENGINE_DEFAULT_LOADING, False
            entries.append(LayoutEntry("loading", key, float(start), lo, hi, user_start=user))
    for f in spec.factors:
        v = spec.factor_variances.get(f)
        if strategy.variant(f) == "fixvar" and v is None:
            v = 1.0
        entries.append(LayoutEntry("factor_variance", (f,), 1.0 if v is None else v,
                                   VARIANCE_FLOOR if v is None else -math.inf, math.inf, fixed=v))
    for (f, g), v in spec.factor_covariances.items():
        entries.append(LayoutEntry("factor_covariance", (f, g), 0.0 if v is None else v, fixed=v))
    for x in spec.indicator_names:
        v = spec.residual_variances.get(x)
        entries.append(LayoutEntry("residual_variance", (x,), 0.5 if v is None else v,
                                   VARIANCE_FLOOR if v is None else -math.inf, math.inf, fixed=v))
    for x in spec.indicator_names:
        v = spec.intercepts.get(x)
        entries.append(LayoutEntry("intercept", (x,), 0.0 if v is None else v, fixed=v))
    return ParameterLayout(tuple(spec.factors), tuple(spec.indicator_names), tuple(entries),
                           dict(strategy.anchors))


def implied_covariance(layout: ParameterLayout, theta) -> np.ndarray:
    """Model-implied covariance ``Lambda Phi Lambda' + diag(residual variances)``."""
    lam, phi, psi = layout.matrices(theta)
    if np.any(psi < 0):
        bad = [layout.indicators[i] for i in np.flatnonzero(psi < 0)]
        raise EstimationError(f"negative residual variance for {bad}")
    sigma = lam @ phi @ lam.T
    sigma = 0.5 * (sigma + sigma.T)
    sigma[np.diag_indices_from(sigma)] += psi
    return sigma
