"""Experiment runners behind ``rdcp run``.

A config is one JSON object with a ``kind`` field; every other field is
validated strictly (unknown or missing fields are errors that name the
field path). Each runner returns an :class:`ExperimentResult` holding output
files and a list of named assertions.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .bruteforce import brute_force_rdcp
from .codec import (attach_posterior_decoder, decode_batch,
                    design_mse_codec, dp_traversal, encode_batch, overhead_audit,
                    random_embedded_source, random_pipeline)
from .core import (FAMILIES, DistortionSpec, DivergenceSpec, JointSource, ReconstructionKernel,
                   SourceSpecError, load_source, parse_source)
from .measures import entropy
from .oneshot import simulate_oneshot
from .randomness import (RandomnessInstance, float_gaussian_entropy, instance_corpus,
                         min_common_randomness, quaternary_instances, report_csv,
                         uniform_grid_entropy, verify_lowerbound)
from .solver import (MODES, UNCONSTRAINED, InfeasibleError, SolverConfig, TradeoffQuery,
                     solve_rd, solve_rdcp, trace_curve)

KINDS = ("rd-curve", "rdcp-curve", "oneshot", "pipeline", "overhead", "traversal",
         "randomness", "float-entropy", "coder")
STOCHASTIC = {"oneshot", "traversal", "float-entropy", "coder"}


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


class CellError(RuntimeError):
    """A library error raised while computing one experiment cell."""


# -- strict config reading ---------------------------------------------------

_REQUIRED = object()


class Section:
    """Typed, strict view of one JSON object in the config."""

    def __init__(self, data, path: str, base: Path):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or '<config>'}: expected an object")
        self.data = data
        self.path = path
        self.base = base
        self.used = set()

    def _where(self, name):
        return f"{self.path}.{name}" if self.path else name

    def has(self, name) -> bool:
        return name in self.data

    def raw(self, name, default=_REQUIRED):
        self.used.add(name)
        if name not in self.data:
            if default is _REQUIRED:
                raise ConfigError(f"{self._where(name)}: missing required field")
            return default
        return self.data[name]

    def get(self, name, check: Callable, default=_REQUIRED):
        if name not in self.data and default is not _REQUIRED:
            self.used.add(name)
            return default
        value = self.raw(name)
        try:
            return check(value)
        except ConfigError as exc:
            raise ConfigError(f"{self._where(name)}: {exc}") from None

    def sub(self, name, default=_REQUIRED) -> "Section":
        value = self.raw(name, {} if default is not _REQUIRED else _REQUIRED)
        return Section(value, self._where(name), self.base)

    def items(self, name) -> list:
        value = self.raw(name)
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{self._where(name)}: expected a non-empty list")
        return [Section(v, f"{self._where(name)}[{i}]", self.base) for i, v in enumerate(value)]

    def done(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(f"{self._where(extra[0])}: unknown field")


def _int(lo=None):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"must be >= {lo}, got {v}")
        return v
    return check


def _float(lo=None, allow_inf=False):
    def check(v):
        if allow_inf and v in ("inf", "infinity"):
            return math.inf
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError("must be finite")
        if lo is not None and v < lo:
            raise ConfigError(f"must be >= {lo}, got {v}")
        return v
    return check


def _bool(v):
    if not isinstance(v, bool):
        raise ConfigError(f"expected true/false, got {v!r}")
    return v


def _choice(options):
    def check(v):
        if v not in options:
            raise ConfigError(f"expected one of {list(options)}, got {v!r}")
        return v
    return check


def _grid(lo=0.0, allow_inf=False):
    item = _float(lo, allow_inf)

    def check(v):
        if not isinstance(v, list):
            raise ConfigError("expected a list of numbers")
        if not v:
            raise ConfigError("grid must not be empty")
        vals = []
        for i, x in enumerate(v):
            try:
                vals.append(item(x))
            except ConfigError as exc:
                raise ConfigError(f"[{i}]: {exc}") from None
        if vals != sorted(vals):
            raise ConfigError("grid must be sorted ascending")
        return vals
    return check


def _range2(kind):
    def check(v):
        if (not isinstance(v, list) or len(v) != 2
                or any(isinstance(x, bool) or not isinstance(x, int) for x in v)
                or not 1 <= v[0] <= v[1]):
            raise ConfigError(f"expected [lo, hi] {kind} sizes with 1 <= lo <= hi")
        return tuple(v)
    return check


def _source(section: Section, name: str) -> JointSource:
    """A source is a path (relative to the config), an inline spec or {"bernoulli": p}."""
    value = section.raw(name)
    where = section._where(name)
    if isinstance(value, str):
        path = (section.base / value)
        if not path.exists():
            raise ConfigError(f"{where}: source file {value!r} not found")
        try:
            return load_source(path)
        except SourceSpecError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if isinstance(value, dict) and set(value) == {"bernoulli"}:
        p = _float(0.0)(value["bernoulli"])
        if not 0.0 < p < 1.0:
            raise ConfigError(f"{where}.bernoulli: must lie in (0, 1)")
        return JointSource.bernoulli(p)
    try:
        return parse_source(value, where)
    except SourceSpecError as exc:
        raise ConfigError(str(exc)) from None


def _sources(cfg: Section, rng_seed: int, embedded_default: bool) -> list:
    """Either ``source``/``sources`` or a ``random_sources`` block."""
    present = [k for k in ("source", "sources", "random_sources") if cfg.has(k)]
    if len(present) != 1:
        raise ConfigError("exactly one of 'source', 'sources', 'random_sources' is required")
    key = present[0]
    if key == "source":
        return [_source(cfg, "source")]
    if key == "sources":
        raw = cfg.raw("sources")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("sources: expected a non-empty list")
        holder = Section({str(i): v for i, v in enumerate(raw)}, "sources", cfg.base)
        return [_source(holder, str(i)) for i in range(len(raw))]
    rs = cfg.sub("random_sources")
    count = rs.get("count", _int(1))
    nx = rs.get("nx", _range2("x"), (2, 2))
    ny = rs.get("ny", _range2("y"), (2, 2))
    embedded = rs.get("embedded", _bool, embedded_default)
    seed = rs.get("seed", _int(0), rng_seed)
    rs.done()
    rng = np.random.default_rng(seed)
    return [random_embedded_source(rng, nx, ny) if embedded else random_unit_source(rng, nx, ny)
            for _ in range(count)]


def random_unit_source(rng: np.random.Generator, nx=(2, 2), ny=(2, 2)) -> JointSource:
    """Random joint law with x symbols 0..n-1 embedded at their index."""
    n = int(rng.integers(nx[0], nx[1] + 1))
    m = int(rng.integers(ny[0], ny[1] + 1))
    pxgy = rng.dirichlet(np.ones(n), size=m) + 1e-3
    pxgy /= pxgy.sum(axis=1, keepdims=True)
    py = rng.dirichlet(np.ones(m)) + 1e-3
    py /= py.sum()
    pmf = (pxgy * py[:, None]).T
    return JointSource(tuple(range(n)), tuple(range(m)), pmf / pmf.sum(),
                       x_values=np.arange(n, dtype=float))


def _solver_config(cfg: Section) -> SolverConfig:
    s = cfg.sub("solver", {})
    out = SolverConfig(tol=s.get("tol", _float(1e-12), 1e-4),
                       method=s.get("method", _choice(("conic", "frank-wolfe")), "conic"))
    s.done()
    return out


# -- results -----------------------------------------------------------------

@dataclass
class Assertion:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "pass": bool(self.passed), "detail": _jsonable(self.detail)}


@dataclass
class ExperimentResult:
    kind: str
    assertions: list = field(default_factory=list)
    files: dict = field(default_factory=dict)          # name -> text (CSV gets the header)
    summary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    seed: int = None

    @property
    def all_pass(self) -> bool:
        return all(a.passed for a in self.assertions)

    def check(self, name, passed, **detail):
        self.assertions.append(Assertion(name, bool(passed), detail))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if v is UNCONSTRAINED:
        return "inf"
    return v


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    if x is UNCONSTRAINED:
        return "inf"
    return x


def cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


class _Cell:
    """Attach the experiment cell label to library errors."""

    def __init__(self, label):
        self.label = label

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not isinstance(exc, (ConfigError, CellError, KeyboardInterrupt)):
            raise CellError(f"cell {self.label}: {type(exc).__name__}: {exc}") from exc
        return False


# -- rd-curve ----------------------------------------------------------------

def binary_rd(p: float, D: float) -> float:
    """Closed-form binary Hamming R(D) = h(p) - h(D) for D < min(p, 1-p)."""
    m = min(p, 1.0 - p)
    if D >= m:
        return 0.0
    return entropy([p, 1 - p]) - entropy([D, 1 - D])


def run_rd_curve(cfg: Section, ctx) -> ExperimentResult:
    sources = _sources(cfg, ctx.seed, False)
    dist_kind = cfg.get("distortion", _choice(("hamming", "mse")), "hamming")
    grid = cfg.get("D_grid", _grid())
    tol = cfg.get("closed_form_tol", _float(0.0), 1e-3)
    config = _solver_config(cfg)
    cfg.done()
    res = ExperimentResult("rd-curve")
    for s, src in enumerate(sources):
        d = DistortionSpec.for_source(src, dist_kind)
        closed = (dist_kind == "hamming" and src.nx == 2
                  and d.table.shape == (2, 2))
        rows, errs, rates = [], [], []
        for i, D in enumerate(grid):
            with _Cell(f"source {s}, D={D:g}"):
                pt = solve_rd(src, d, D, config)
            cf = binary_rd(float(src.p_x[1]), D) if closed else math.nan
            rows.append((s, D, pt.rate, pt.distortion, cf))
            rates.append(pt.rate)
            if closed:
                errs.append(abs(pt.rate - cf))
        res.files[f"rd_curve_{s}.csv"] = _csv(
            rows, ["source", "D", "rate_bits", "realized_D", "closed_form_bits"])
        inc = max([b - a for a, b in zip(rates, rates[1:])] + [0.0])
        res.check(f"monotone[{s}]", inc <= config.tol, max_increase=inc)
        if closed:
            res.check(f"closed-form[{s}]", max(errs) <= tol, max_abs_error=max(errs), tol=tol,
                      p=float(src.p_x[1]))
    return res


# -- rdcp-curve --------------------------------------------------------------

def _divergences(cfg: Section) -> list:
    raw = cfg.raw("divergence", "tv")
    names = raw if isinstance(raw, list) else [raw]
    if not names:
        raise ConfigError("divergence: expected a family or non-empty list")
    for n in names:
        if n not in FAMILIES:
            raise ConfigError(f"divergence: expected one of {list(FAMILIES)}, got {n!r}")
    return [DivergenceSpec(n) for n in names]


def _convexity_violations(R, D_grid, P_grid):
    """Worst midpoint-convexity excess along axes and joint diagonals.

    Uses 3-point chords on non-uniform axes; joint midpoints need uniform grids.
    Infinite P entries are skipped.
    """
    D = np.asarray(D_grid, float)
    P = np.asarray([math.inf if p is UNCONSTRAINED else float(p) for p in P_grid])
    fin = np.isfinite(P)
    worst = 0.0
    nD, nP = R.shape

    def chord(a, b, t):
        return (1 - t) * a + t * b

    for j in range(nP):
        for i in range(nD - 2):
            t = (D[i + 1] - D[i]) / (D[i + 2] - D[i])
            worst = max(worst, R[i + 1, j] - chord(R[i, j], R[i + 2, j], t))
    for i in range(nD):
        for j in range(nP - 2):
            if fin[j + 2]:
                t = (P[j + 1] - P[j]) / (P[j + 2] - P[j])
                worst = max(worst, R[i, j + 1] - chord(R[i, j], R[i, j + 2], t))
    uniform = (nD < 3 or np.allclose(np.diff(D), D[1] - D[0])) and \
              (fin.sum() < 3 or np.allclose(np.diff(P[fin]), P[1] - P[0]))
    if uniform:
        for i in range(nD):
            for j in range(nP):
                for i2 in range(i + 2, nD, 2):
                    for j2 in range(nP):
                        if (j2 - j) % 2 or not (fin[j] and fin[j2]):
                            continue
                        a, b = R[i, j], R[i2, j2]
                        mid = R[(i + i2) // 2, (j + j2) // 2]
                        worst = max(worst, mid - 0.5 * (a + b))
    return float(np.nan_to_num(worst, nan=0.0))


def _curve_unit(args):
    """Everything computed for one (source, family) pair."""
    s, src, dist_kind, div, Ds, P_vals, mode, config, halving, bf = args
    label = f"source {s}, {div.family}"
    d = DistortionSpec.for_source(src, dist_kind)
    with _Cell(label):
        curve = trace_curve(src, d, div, Ds, P_vals, config, mode)
    halving_excess = []
    if halving:
        for D in Ds:
            with _Cell(f"{label}, halving D={D:g}"):
                a = solve_rdcp(src, d, TradeoffQuery(D, 0.0, mode, div), config).rate
                b = solve_rdcp(src, d, TradeoffQuery(D / 2, UNCONSTRAINED, mode, div),
                               config).rate
            halving_excess.append((D, a - b))
    comparisons = []
    if bf is not None:
        resolution, _ = bf
        for i, D in enumerate(Ds):
            for j, P in enumerate(P_vals):
                cell = curve.cells[i][j]
                with _Cell(f"{label}, brute force D={D:g} P={P}"):
                    try:
                        b = brute_force_rdcp(src, d, div, TradeoffQuery(D, P, mode, div),
                                             resolution)
                        b = (b.rate, b.lower, b.gap)
                    except InfeasibleError:
                        b = None
                comparisons.append((D, P, cell.point.rate if cell.feasible else None, b))
    return label, curve, halving_excess, comparisons


def run_rdcp_curve(cfg: Section, ctx) -> ExperimentResult:
    sources = _sources(cfg, ctx.seed, False)
    dist_kind = cfg.get("distortion", _choice(("hamming", "mse")), "hamming")
    divs = _divergences(cfg)
    mode = cfg.get("mode", _choice(MODES), "per-y")
    scale = cfg.get("scale_D_by_variance", _bool, False)
    D_grid = cfg.get("D_grid", _grid())
    P_grid = cfg.get("P_grid", _grid(allow_inf=True), [math.inf])
    mono_tol = cfg.get("monotonicity_tol", _float(0.0), 1e-4)
    conv_tol = cfg.get("convexity_tol", _float(0.0), 2e-4)
    halving = cfg.get("halving_check", _bool, False)
    bf = None
    if cfg.has("brute_force"):
        b = cfg.sub("brute_force")
        bf = (b.get("resolution", _float(1e-9), 1e-3), b.get("tol", _float(0.0), 1e-3))
        b.done()
    config = _solver_config(cfg)
    cfg.done()
    for s, src in enumerate(sources):
        if dist_kind == "mse" and src.x_values is None:
            raise ConfigError(f"source {s}: mse distortion needs x_values")
    P_vals = [UNCONSTRAINED if math.isinf(p) else p for p in P_grid]
    units = []
    for s, src in enumerate(sources):
        unit = _conditional_variance(src) if scale else 1.0
        Ds = [unit * D for D in D_grid]
        units += [(s, src, dist_kind, div, Ds, P_vals, mode, config, halving, bf)
                  for div in divs]
    outs = _map(_curve_unit, units, ctx.jobs)

    res = ExperimentResult("rdcp-curve")
    mono_all, conv_all, halving_worst, bf_worst = [], [], -math.inf, -math.inf
    bf_rows, half_rows = [], []
    for (s, _, _, div, Ds, *_), (label, curve, half, comps) in zip(units, outs):
        res.files[f"curve_{s}_{div.family}.csv"] = curve.to_csv()
        mono_all.extend(f"{label}: {m}" for m in curve.diagnostics
                        if _diag_excess(m) > mono_tol)
        worst = _convexity_violations(curve.rates(), Ds, P_vals)
        if worst > conv_tol:
            conv_all.append(f"{label}: midpoint excess {worst:.3g}")
        res.summary.setdefault("worst_convexity_excess", {})[f"{s}/{div.family}"] = worst
        for D, ex in half:
            half_rows.append((s, div.family, D, ex))
            halving_worst = max(halving_worst, ex)
        for D, P, a, b in comps:
            if a is None or b is None:
                ok = a is None and b is None
                bf_rows.append((s, div.family, D, P, a, None, None, None, ok))
                excess = 0.0 if ok else math.inf
            else:
                upper, lower, gap = b
                excess = max(a - upper, lower - a, 0.0) - bf[1]
                bf_rows.append((s, div.family, D, P, a, upper, lower, gap, excess <= 0))
            bf_worst = max(bf_worst, excess)
    res.check("monotonicity", not mono_all, tol=mono_tol, violations=mono_all)
    res.check("midpoint-convexity", not conv_all, tol=conv_tol, violations=conv_all)
    if halving:
        res.files["halving.csv"] = _csv(half_rows, ["source", "divergence", "D",
                                                    "rate_P0_minus_rate_halfD_inf"])
        res.check("perfect-perception-halving", halving_worst <= config.tol,
                  worst_excess_bits=halving_worst, tol=config.tol)
    if bf is not None:
        res.files["brute_force.csv"] = _csv(
            [tuple("" if v is None else v for v in r) for r in bf_rows],
            ["source", "divergence", "D", "P", "solver_bits", "grid_upper_bits",
             "grid_lower_bits", "grid_gap_bits", "agrees"])
        res.check("brute-force-agreement", bf_worst <= 0, worst_excess_bits=bf_worst,
                  tol=bf[1], comparisons=len(bf_rows))
    return res


def _diag_excess(msg: str) -> float:
    return float(msg.split("by ", 1)[1].split(" ", 1)[0])


def _conditional_variance(src: JointSource) -> float:
    v = src.x_values
    m = src.p_x_given_y @ v
    return float(src.p_y @ (src.p_x_given_y @ v ** 2 - m ** 2))


# -- oneshot -----------------------------------------------------------------

def _kernel(ks: Section, src: JointSource, dist_kind: str, config) -> tuple:
    """Returns (kernel, divergence or None, optimum rate or None)."""
    kind = ks.get("type", _choice(("identity", "marginal", "rd", "rdcp", "table")))
    d = DistortionSpec.for_source(src, dist_kind)
    if kind == "identity":
        ks.done()
        return ReconstructionKernel.identity(src), None, None
    if kind == "marginal":
        ks.done()
        q = np.broadcast_to(src.p_x_given_y[None], (src.nx, src.ny, src.nx)).copy()
        return ReconstructionKernel.from_rows(q, src.x_alphabet, src.x_values), None, 0.0
    if kind == "rd":
        D = ks.get("D", _float(0.0))
        ks.done()
        pt = solve_rd(src, d, D, config)
        return pt.kernel, None, pt.rate
    if kind == "rdcp":
        D = ks.get("D", _float(0.0))
        P = ks.get("P", _float(0.0, allow_inf=True), math.inf)
        div = DivergenceSpec(ks.get("divergence", _choice(FAMILIES), "tv"))
        mode = ks.get("mode", _choice(MODES), "per-y")
        ks.done()
        pt = solve_rdcp(src, d, TradeoffQuery(D, UNCONSTRAINED if math.isinf(P) else P, mode, div),
                        config)
        return pt.kernel, div, pt.rate
    q = ks.get("q", lambda v: np.asarray(v, float))
    ks.done()
    try:
        return ReconstructionKernel.from_rows(q, src.x_alphabet, src.x_values), None, None
    except ValueError as exc:
        raise ConfigError(f"{ks.path}.q: {exc}") from None


def _oneshot_task(args):
    src, kernel, div, trials, seed, dist_kind = args
    d = DistortionSpec.for_source(src, dist_kind)
    return simulate_oneshot(src, kernel, div, trials, seed, d)


def run_oneshot(cfg: Section, ctx) -> ExperimentResult:
    trials = cfg.get("trials", _int(1))
    dist_kind = cfg.get("distortion", _choice(("hamming", "mse")), "hamming")
    alpha = cfg.get("chi_square_alpha", _float(0.0), 1e-3)
    converse = cfg.get("converse_n_se", _float(0.0), 3.0)
    config = _solver_config(cfg)
    cells = []
    for c in cfg.items("cells"):
        src = _source(c, "source")
        label = c.get("label", str, None) or f"cell{len(cells)}"
        with _Cell(label):
            kernel, div, opt = _kernel(c.sub("kernel"), src, dist_kind, config)
        c.done()
        cells.append((label, src, kernel, div, opt))
    cfg.done()
    tasks = [(src, k, div, trials, cell_seed(ctx.seed, i), dist_kind)
             for i, (_, src, k, div, _) in enumerate(cells)]
    with _Cell("oneshot simulation"):
        reports = _map(_oneshot_task, tasks, ctx.jobs)
    res = ExperimentResult("oneshot")
    rows = []
    for (label, src, kernel, div, opt), rep in zip(cells, reports):
        res.files[f"trials_{label}.csv"] = rep.trial_csv(src, kernel)
        rows.append((label, rep.trials, rep.information, rep.bound, rep.mean_codelength,
                     rep.se_codelength, rep.min_pvalue, rep.cap_failures,
                     rep.decoder_mismatches, "" if opt is None else opt))
        res.check(f"rate-bound[{label}]", rep.bound_holds, information_bits=rep.information,
                  bound_bits=rep.bound, mean_codelength_bits=rep.mean_codelength)
        res.check(f"chi-square[{label}]", rep.chi_square_passes(alpha),
                  min_pvalue=rep.min_pvalue, alpha=alpha)
        res.check(f"decoder[{label}]", rep.decoder_mismatches == 0 and rep.cap_failures == 0,
                  mismatches=rep.decoder_mismatches, cap_failures=rep.cap_failures)
        if opt is not None:
            res.check(f"above-optimum[{label}]", rep.above_optimum(opt, converse),
                      optimum_bits=opt, mean_codelength_bits=rep.mean_codelength,
                      se_bits=rep.se_codelength)
        res.summary[label] = rep.summary()
    res.files["oneshot_summary.csv"] = _csv(
        rows, ["cell", "trials", "information_bits", "bound_bits", "mean_codelength_bits",
               "se_bits", "chi_square_min_pvalue", "cap_failures", "decoder_mismatches",
               "optimum_bits"])
    return res


# -- pipelines ---------------------------------------------------------------

def _pipelines(cfg: Section, ctx, deterministic_default: bool) -> list:
    """Pipelines from explicit sources (with ``m_budget``) or a ``random`` block."""
    if cfg.has("random"):
        r = cfg.sub("random")
        count = r.get("count", _int(1))
        seed = r.get("seed", _int(0), ctx.seed)
        det = r.get("deterministic_y", _bool, deterministic_default)
        cond = r.get("conditional", _bool, True)
        r.done()
        if cfg.has("source") or cfg.has("sources"):
            raise ConfigError("give either 'random' or 'source'/'sources', not both")
        rng = np.random.default_rng(seed)
        return [(f"p{i}", random_pipeline(rng, det, cond)) for i in range(count)]
    sources = _sources(cfg, ctx.seed, True)
    budget = cfg.get("m_budget", _int(1))
    cond = cfg.get("conditional", _bool, True)
    out = []
    for i, src in enumerate(sources):
        if src.x_values is None:
            raise ConfigError(f"source {i}: needs x_values for MSE design")
        with _Cell(f"design {i}"):
            out.append((f"p{i}", attach_posterior_decoder(design_mse_codec(src, budget, cond))))
    return out


def run_pipeline(cfg: Section, ctx) -> ExperimentResult:
    pipes = _pipelines(cfg, ctx, False)
    tol = cfg.get("tol", _float(0.0), 1e-12)
    write = cfg.get("write_pipelines", _bool, True)
    cfg.done()
    res = ExperimentResult("pipeline")
    law_bad, dbl_bad, eq_bad, acct_bad = [], [], [], []
    rows = []
    for label, pipe in pipes:
        src = pipe.source
        with _Cell(label):
            lawerr = float(np.max(np.abs(pipe.perceptual_law_given_y() - src.p_x_given_y)))
            mse = pipe.mse_per_y()
            pmse = pipe.perceptual_mse_per_y()
            pairs = [(src.x_alphabet[i], src.y_alphabet[j]) for i in range(src.nx)
                     for j in range(src.ny) if src.pmf[i, j] > 0]
            stream, sizes = encode_batch(pipe, pairs)
            recs = decode_batch(pipe, stream, len(pairs), 1.0, 0)
        if lawerr > tol:
            law_bad.append(f"{label}: {lawerr:.3g}")
        scale = max(1.0, float(np.max(mse)))
        if np.any(pmse > 2 * mse + tol * scale):
            dbl_bad.append(label)
        if np.any(np.abs(pmse - 2 * mse) > 1e-9 * scale):
            eq_bad.append(label)
        acct = sum(a + b for a, b in sizes)
        if acct != len(stream) or any((r.bits_y, r.bits_m) != s for r, s in zip(recs, sizes)):
            acct_bad.append(label)
        for j in range(src.ny):
            rows.append((label, src.y_alphabet[j], src.p_y[j], mse[j], pmse[j],
                         pmse[j] / mse[j] if mse[j] > 0 else math.nan))
        if write:
            res.files[f"pipeline_{label}.json"] = pipe.to_json() + "\n"
    res.files["doubling.csv"] = _csv(rows, ["pipeline", "y", "p_y", "mse_xhat", "mse_xtilde",
                                            "ratio"])
    res.check("perceptual-law-exact", not law_bad, tol=tol, violations=law_bad)
    res.check("mse-doubling-bound", not dbl_bad, violations=dbl_bad)
    res.check("mse-doubling-equality", not eq_bad, violations=eq_bad)
    res.check("bitstream-accounting", not acct_bad, violations=acct_bad)
    res.summary["pipelines"] = len(pipes)
    return res


def run_overhead(cfg: Section, ctx) -> ExperimentResult:
    pipes = _pipelines(cfg, ctx, True)
    tol = cfg.get("identity_tol", _float(0.0), 1e-10)
    cfg.done()
    res = ExperimentResult("overhead")
    rows, ineq_bad, id_bad = [], [], []
    for label, pipe in pipes:
        with _Cell(label):
            rep = overhead_audit(pipe)
        rows.append((label, rep.R, rep.R_M, rep.R_Y, rep.slack, rep.H_M, rep.H_M_given_Y,
                     rep.H_Y, rep.H_Y_given_M, rep.identity_gap, rep.holds))
        if not rep.holds:
            ineq_bad.append(label)
        if rep.identity_gap > tol or rep.H_Y_given_M > tol:
            id_bad.append(label)
    res.files["overhead.csv"] = _csv(rows, ["pipeline", "R_bits", "R_M_bits", "R_Y_bits",
                                            "slack_bits", "H_M", "H_M_given_Y", "H_Y",
                                            "H_Y_given_M", "identity_gap", "holds"])
    res.check("overhead-bound", not ineq_bad, violations=ineq_bad, pipelines=len(pipes))
    res.check("entropy-identity", not id_bad, tol=tol, violations=id_bad)
    return res


def _traversal_task(args):
    pipe, alphas, div, trials, seed = args
    return dp_traversal(pipe, alphas, div, trials, seed)


def run_traversal(cfg: Section, ctx) -> ExperimentResult:
    pipes = _pipelines(cfg, ctx, False)
    alphas = cfg.get("alphas", _grid(), [i / 10 for i in range(11)])
    div = DivergenceSpec(cfg.get("divergence", _choice(FAMILIES), "w2"))
    trials = cfg.get("trials", _int(2))
    n_se = cfg.get("n_se", _float(0.0), 3.0)
    cfg.done()
    if alphas[0] < 0 or alphas[-1] > 1:
        raise ConfigError("alphas: values must lie in [0, 1]")
    tasks = [(p, alphas, div, trials, cell_seed(ctx.seed, i)) for i, (_, p) in enumerate(pipes)]
    with _Cell("traversal"):
        curves = _map(_traversal_task, tasks, ctx.jobs)
    res = ExperimentResult("traversal")
    law_bad, end_bad, flags = [], [], []
    for (label, pipe), curve in zip(pipes, curves):
        res.files[f"traversal_{label}.csv"] = curve.to_csv()
        mse = pipe.mse()
        for pt in curve.points:
            if not pt.within(n_se):
                law_bad.append(f"{label} alpha={pt.alpha:g}: {pt.mse_mc:.6g} vs "
                               f"{pt.mse_predicted:.6g} (se {pt.mse_se:.3g})")
        first, last = curve.points[0], curve.points[-1]
        scale = max(1.0, mse)
        if first.alpha == 0.0 and abs(first.mse - mse) > 1e-12 * scale:
            end_bad.append(f"{label}: mse(0)")
        if last.alpha == 1.0 and (abs(last.mse - 2 * mse) > 1e-12 * scale
                                  or last.divergence > 1e-12):
            end_bad.append(f"{label}: alpha=1")
        if curve.monotonicity_violations:
            flags.append(f"{label}: {len(curve.monotonicity_violations)} divergence "
                         "increases along alpha")
    res.flags = flags
    res.check("interpolation-law", not law_bad, n_se=n_se, violations=law_bad)
    res.check("endpoints-exact", not end_bad, violations=end_bad)
    return res


# -- randomness --------------------------------------------------------------

def _inline_instance(c: Section, k: int) -> RandomnessInstance:
    src = _source(c, "source")
    enc = c.get("encoder", lambda v: v)
    cond = c.get("conditional", _bool, False)
    code = c.get("code", _choice(("huffman", "fixed", "explicit")), "huffman")
    lengths = c.get("code_lengths", lambda v: v, None)
    name = c.get("name", str, f"inline{k}")
    c.done()
    try:
        if code == "explicit":
            if lengths is None:
                raise ConfigError(f"{c.path}.code_lengths: required when code is 'explicit'")
            return RandomnessInstance(src, enc, lengths, cond, name)
        maker = RandomnessInstance.with_huffman if code == "huffman" \
            else RandomnessInstance.with_fixed_length
        return maker(src, enc, cond, name)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{c.path}: {exc}") from None


def run_randomness(cfg: Section, ctx) -> ExperimentResult:
    spec = cfg.raw("instances")
    if spec == "quaternary":
        insts = quaternary_instances()
    elif spec == "corpus":
        cs = cfg.sub("corpus", {})
        insts = instance_corpus(cs.get("seed", _int(0), ctx.seed), cs.get("count", _int(1), 200),
                                cs.get("conditional_share", _float(0.0), 0.5))
        cs.done()
    elif isinstance(spec, list) and spec:
        items = cfg.items("instances")
        insts = [_inline_instance(c, k) for k, c in enumerate(items)]
    else:
        raise ConfigError("instances: expected 'quaternary', 'corpus' or a list of instances")
    bound = cfg.get("search_bound", _int(1), 24)
    cfg.done()
    res = ExperimentResult("randomness")
    reports, bad, wit_bad, missing = [], [], [], []
    for inst in insts:
        with _Cell(inst.name):
            found = min_common_randomness(inst, bound)
            rep = verify_lowerbound(inst, found)
        reports.append(rep)
        if not rep.holds:
            bad.append(inst.name)
        if found.found and not rep.exact_law_ok:
            wit_bad.append(inst.name)
        if not found.found:
            missing.append(inst.name)
    res.files["randomness.csv"] = report_csv(reports)
    res.check("lower-bound", not bad, instances=len(insts), violations=bad)
    res.check("witness-exact", not wit_bad, violations=wit_bad)
    if missing:
        res.flags.append(f"{len(missing)} instances exceeded |W| <= {bound}: {missing}")
    return res


# -- float entropy -----------------------------------------------------------

def run_float_entropy(cfg: Section, ctx) -> ExperimentResult:
    samples = cfg.get("samples", _int(10 ** 5))
    quant = cfg.get("quantizer", _choice(("binary32", "uniform")), "binary32")
    delta = cfg.get("delta", _float(1e-300), None)
    expected = cfg.get("expected_bits", _float(), None)
    tol = cfg.get("tolerance_bits", _float(0.0), 0.3)
    exact = cfg.get("compare_exact", _bool, quant == "uniform")
    cfg.done()
    if quant == "uniform" and delta is None:
        raise ConfigError("delta: required for the uniform quantizer")
    with _Cell(quant):
        est = float_gaussian_entropy(samples, quant, ctx.seed, delta)
    res = ExperimentResult("float-entropy")
    res.summary = {"bits": est.bits, "se": est.se, "samples": est.samples,
                   "quantizer": est.quantizer}
    res.files["entropy.csv"] = _csv([(quant, "" if delta is None else delta, samples, est.bits,
                                      est.se)], ["quantizer", "delta", "samples", "bits", "se"])
    if expected is not None:
        res.check("expected-value", abs(est.bits - expected) <= tol, bits=est.bits,
                  expected=expected, tol=tol)
    if exact and quant == "uniform":
        ref = uniform_grid_entropy(delta)
        res.check("exact-enumeration", abs(est.bits - ref) <= max(4 * est.se, 1e-6),
                  bits=est.bits, exact_bits=ref, se=est.se)
    return res


# -- coder -------------------------------------------------------------------

def run_coder(cfg: Section, ctx) -> ExperimentResult:
    from .coding import FrequencyModel, ac_decode, ac_encode, ideal_codelength
    from .goldens import compare

    trials = cfg.get("trials", _int(1))
    max_len = cfg.get("max_length", _int(1), 64)
    max_alpha = cfg.get("max_alphabet", _int(2), 16)
    slack = cfg.get("slack_bits", _float(0.0), 2.0)
    golden_dir = cfg.get("golden_dir", str, None)
    cfg.done()
    rng = np.random.default_rng(ctx.seed)
    fails, over, worst = 0, 0, -math.inf
    for _ in range(trials):
        n = int(rng.integers(0, max_len + 1))
        models = []
        for _ in range(int(rng.integers(1, 4))):
            a = int(rng.integers(2, max_alpha + 1))
            models.append(FrequencyModel.from_pmf(rng.dirichlet(np.full(a, 0.5))))
        per = [models[int(rng.integers(len(models)))] for _ in range(n)]
        syms = [int(rng.choice(len(m), p=np.array(m.counts) / m.total)) for m in per]
        stream = ac_encode(syms, per)
        if ac_decode(stream, per, n) != syms:
            fails += 1
        excess = len(stream) - ideal_codelength(syms, per)
        worst = max(worst, excess)
        over += excess > slack
    res = ExperimentResult("coder")
    res.check("round-trip", fails == 0, trials=trials, failures=fails)
    res.check("length-bound", over == 0, worst_excess_bits=worst, slack_bits=slack)
    if golden_dir is not None:
        diff = compare(Path(cfg.base) / golden_dir)
        res.check("goldens-byte-stable", not diff["changed"] and not diff["new"],
                  changed=diff["changed"], missing=diff["new"])
    return res


RUNNERS = {
    "rd-curve": run_rd_curve,
    "rdcp-curve": run_rdcp_curve,
    "oneshot": run_oneshot,
    "pipeline": run_pipeline,
    "overhead": run_overhead,
    "traversal": run_traversal,
    "randomness": run_randomness,
    "float-entropy": run_float_entropy,
    "coder": run_coder,
}


# -- driver --------------------------------------------------------------------

@dataclass
class RunContext:
    seed: int
    jobs: int = 1


def parse_config(text: str, origin: str = "<config>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be an object")
    return data


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def report_header(text: str) -> str:
    return f"# rdcp {__version__} config-sha256={config_hash(text)}"


def run_experiment(text: str, base: Path = Path("."), seed_override=None, jobs: int = 1,
                   origin: str = "<config>") -> tuple:
    """Validate and run one config; returns (result, header line)."""
    data = parse_config(text, origin)
    cfg = Section(data, "", Path(base))
    kind = cfg.get("kind", _choice(KINDS))
    if kind in STOCHASTIC and "seed" not in data and seed_override is None:
        raise ConfigError("seed: required for stochastic experiments")
    seed = cfg.get("seed", _int(0), 0)
    if seed_override is not None:
        seed = int(seed_override)
    res = RUNNERS[kind](cfg, RunContext(seed, max(1, int(jobs))))
    res.seed = seed
    return res, report_header(text)


def write_report(res: ExperimentResult, header: str, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(res.files.items()):
        body = text if name.endswith(".json") else f"{header}\n{text}"
        (out / name).write_text(body)
    report = {
        "header": header,
        "kind": res.kind,
        "seed": res.seed,
        "assertions": [a.to_dict() for a in res.assertions],
        "all_pass": res.all_pass,
        "flags": res.flags,
        "summary": _jsonable(res.summary),
        "outputs": sorted(res.files),
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
