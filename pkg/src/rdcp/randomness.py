"""Common randomness needed for perfect perception with a deterministic
decoder, and the entropy of float32-quantized Gaussian samples.

A decoder g(m, w) with W uniform on {0..|W|-1} is summarized by counts
c(m, xhat) = #{w : g(m, w) = xhat}. Perfect perception asks
sum_m p(m) c(m, xhat) / |W| = p_X(xhat); feasibility is decided exactly
over integers after clearing denominators.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .coding import huffman_lengths
from .core import JointSource, ReconstructionKernel, induced_laws
from .measures import entropy

MAX_W = 24
MAX_ALPHABET = 6
MAX_DENOMINATOR = 10 ** 4
FLOAT_TOL = 1e-9
MIN_SAMPLES = 10 ** 5


def rationalize_source(source: JointSource, tol: float = FLOAT_TOL) -> JointSource:
    """Snap a float pmf to fractions with denominators <= MAX_DENOMINATOR.

    Each entry must lie within ``tol`` of its snapped value, so the minimal
    |W| found afterwards is minimal only up to that tolerance.
    """
    if source.exact is not None:
        return source
    rows = []
    for i, row in enumerate(source.pmf):
        out = []
        for j, v in enumerate(row):
            f = Fraction(float(v)).limit_denominator(MAX_DENOMINATOR)
            if abs(float(f) - v) > tol:
                raise ValueError(f"pmf[{i}][{j}] = {float(v)!r} is not within {tol} of a fraction "
                                 f"with denominator <= {MAX_DENOMINATOR}")
            out.append(f)
        rows.append(out)
    total = sum(sum(r) for r in rows)
    if total != 1:
        # push the rounding residue onto the largest entry
        i, j = max(((i, j) for i in range(len(rows)) for j in range(len(rows[0]))),
                   key=lambda ij: rows[ij[0]][ij[1]])
        rows[i][j] += 1 - total
        if abs(float(rows[i][j]) - source.pmf[i, j]) > tol or rows[i][j] < 0:
            raise ValueError("snapped pmf cannot be renormalized within tolerance")
    return JointSource.from_rational(rows, source.x_alphabet, source.y_alphabet,
                                     source.x_values, source.xhat_values)


class SearchBoundExceeded(RuntimeError):
    def __init__(self, msg, largest_tried):
        super().__init__(msg)
        self.largest_tried = largest_tried


@dataclass(frozen=True, eq=False)
class RandomnessInstance:
    """Deterministic encoder ``encoder[x][y] -> m`` with prefix-code lengths.

    ``code_lengths[y][m]`` is the length of m's codeword under y's code
    (a single code reused for every y in unconditional mode).
    """

    source: JointSource
    encoder: tuple
    code_lengths: tuple
    conditional: bool = False
    name: str = ""

    def __post_init__(self):
        src = self.source
        if src.exact is None:
            raise ValueError("randomness instances need a rational source "
                             "(see rationalize_source for float pmfs)")
        if src.nx > MAX_ALPHABET:
            raise ValueError(f"|X| = {src.nx} exceeds {MAX_ALPHABET}")
        if any(p.denominator > MAX_DENOMINATOR for row in src.exact for p in row):
            raise ValueError(f"pmf denominators must be <= {MAX_DENOMINATOR}")
        enc = tuple(tuple(int(m) for m in row) for row in self.encoder)
        if len(enc) != src.nx or any(len(r) != src.ny for r in enc):
            raise ValueError("encoder table must be |X| x |Y|")
        object.__setattr__(self, "encoder", enc)
        if self.n_labels > MAX_ALPHABET:
            raise ValueError(f"|M| = {self.n_labels} exceeds {MAX_ALPHABET}")
        lens = tuple(tuple(int(l) for l in row) for row in self.code_lengths)
        if len(lens) != src.ny or any(len(r) != self.n_labels for r in lens):
            raise ValueError("code_lengths must be |Y| x |M|")
        for row, pm in zip(lens, self.p_m_given_y()):
            live = [l for l, v in zip(row, pm) if v > 0]
            if sum(Fraction(1, 2 ** l) for l in live) > 1:
                raise ValueError("code lengths violate the Kraft inequality")
        object.__setattr__(self, "code_lengths", lens)

    @property
    def n_labels(self) -> int:
        return 1 + max(m for row in self.encoder for m in row)

    def p_m_given_y(self) -> list:
        """Exact p(m | y) per y index."""
        src = self.source
        py = src.exact_p_y()
        out = []
        for j in range(src.ny):
            row = [Fraction(0)] * self.n_labels
            for i in range(src.nx):
                row[self.encoder[i][j]] += src.exact[i][j] / py[j]
            out.append(row)
        return out

    def p_m(self) -> list:
        py = self.source.exact_p_y()
        out = [Fraction(0)] * self.n_labels
        for j, row in enumerate(self.p_m_given_y()):
            for m, v in enumerate(row):
                out[m] += py[j] * v
        return out

    def rate(self) -> Fraction:
        """R0 = E[code length], exact."""
        py = self.source.exact_p_y()
        total = Fraction(0)
        for j, row in enumerate(self.p_m_given_y()):
            for m, v in enumerate(row):
                total += py[j] * v * self.code_lengths[j][m]
        return total

    def target_entropy(self) -> float:
        """H(X), or H(X|Y) in conditional mode."""
        src = self.source
        if not self.conditional:
            return entropy(src.p_x)
        return entropy(src.pmf) - entropy(src.p_y)

    def bound(self) -> float:
        return self.target_entropy() - (float(self.rate()) + 1.0)

    @classmethod
    def with_huffman(cls, source: JointSource, encoder, conditional=False, name=""):
        """Instance whose M code is Huffman on p(m) (per y in conditional mode)."""
        proto = cls(source, encoder, _zero_lengths(source, encoder), conditional, name)
        if conditional:
            rows = [_huffman_row(r) for r in proto.p_m_given_y()]
        else:
            rows = [_huffman_row(proto.p_m())] * source.ny
        return cls(source, encoder, tuple(rows), conditional, name)

    @classmethod
    def with_fixed_length(cls, source: JointSource, encoder, conditional=False, name=""):
        n = 1 + max(m for row in encoder for m in row)
        L = 0 if n <= 1 else math.ceil(math.log2(n))
        return cls(source, encoder, tuple((L,) * n for _ in range(source.ny)), conditional,
                   name)


def _zero_lengths(source, encoder):
    n = 1 + max(int(m) for row in encoder for m in row)
    return tuple((n,) * n for _ in range(source.ny))


def _huffman_row(pm):
    live = [m for m, v in enumerate(pm) if v > 0]
    lens = huffman_lengths([float(pm[m]) for m in live])
    row = [0] * len(pm)
    for m, l in zip(live, lens):
        row[m] = l
    return tuple(row)


# -- feasibility search ------------------------------------------------------------------

def _integerize(weights: Sequence[Fraction], target: Sequence[Fraction]):
    L = reduce(lambda a, b: a * b // math.gcd(a, b),
               [f.denominator for f in list(weights) + list(target)], 1)
    return [int(w * L) for w in weights], [int(t * L) for t in target]


def _feasible_counts(P: list, Q: list, W: int) -> Optional[list]:
    """Integer matrix c (rows m, columns x) with row sums W and
    sum_m P[m] c[m][x] = W Q[x], or None.

    Rows of equal weight are merged into one row of capacity k W (any column
    split of a merged row can be dealt back to its members); merged rows are
    searched heaviest first, columns in order, larger counts first.
    """
    nx = len(Q)
    groups: dict = {}
    for m, p in enumerate(P):
        groups.setdefault(p, []).append(m)
    weights = sorted(groups, reverse=True)
    members = [groups[w] for w in weights]
    cap0 = tuple(len(g) * W for g in members)
    ng = len(weights)
    suffix_gcd = [0] * (ng + 1)
    for k in range(ng - 1, -1, -1):
        suffix_gcd[k] = math.gcd(weights[k], suffix_gcd[k + 1])
    memo: dict = {}

    def columns(x, caps):
        key = (x, caps)
        if key in memo:
            return memo[key]
        need = W * Q[x]
        if x == nx - 1:
            res = [list(caps)] if sum(p * c for p, c in zip(weights, caps)) == need else None
            memo[key] = res
            return res
        col = [0] * ng

        def fill(k, rem):
            if k == ng:
                if rem:
                    return None
                tail = columns(x + 1, tuple(c - v for c, v in zip(caps, col)))
                return None if tail is None else [list(col)] + tail
            g = suffix_gcd[k]
            if rem < 0 or (g == 0 and rem) or (g and rem % g):
                return None
            if rem > sum(weights[t] * caps[t] for t in range(k, ng)):
                return None
            hi = caps[k] if weights[k] == 0 else min(caps[k], rem // weights[k])
            for v in range(hi, -1, -1):
                col[k] = v
                got = fill(k + 1, rem - weights[k] * v)
                if got is not None:
                    return got
            col[k] = 0
            return None

        res = fill(0, need)
        memo[key] = res
        return res

    cols = columns(0, cap0)
    if cols is None:
        return None
    out = [[0] * nx for _ in P]
    for k, rows in enumerate(members):
        # deal the merged row's columns to member rows, W slots each
        r, left = 0, W
        for x in range(nx):
            c = cols[x][k]
            while c:
                take = min(c, left)
                out[rows[r]][x] += take
                c -= take
                left -= take
                if left == 0 and r + 1 < len(rows):
                    r, left = r + 1, W
    return out


@dataclass(frozen=True, eq=False)
class RandomnessResult:
    instance: RandomnessInstance
    found: bool
    min_w: Optional[int]
    largest_tried: int
    counts: Optional[tuple] = None       # counts[y][m][xhat]
    feasible_sizes: tuple = field(default=())

    def decoder(self) -> dict:
        """Witness g as {(m, w, y_index): xhat_index}, w in 0..|W|-1."""
        if not self.found:
            raise ValueError("no witness within the search bound")
        g = {}
        for j, cm in enumerate(self.counts):
            for m, row in enumerate(cm):
                w = 0
                for xh, c in enumerate(row):
                    for _ in range(c):
                        g[(m, w, j)] = xh
                        w += 1
        return g

    def witness_kernel(self) -> ReconstructionKernel:
        src = self.instance.source
        W = self.min_w
        q = np.zeros((src.nx, src.ny, src.nx))
        for i in range(src.nx):
            for j in range(src.ny):
                m = self.instance.encoder[i][j]
                q[i, j] = np.asarray(self.counts[j][m], float) / W
        return ReconstructionKernel(q, src.x_alphabet, src.x_values)

    def exact_reconstruction_law(self) -> list:
        """p_{Xhat | y} per y, in rational arithmetic."""
        inst = self.instance
        W = self.min_w
        out = []
        for j, pm in enumerate(inst.p_m_given_y()):
            row = [Fraction(0)] * inst.source.nx
            for m, v in enumerate(pm):
                for xh, c in enumerate(self.counts[j][m]):
                    row[xh] += v * Fraction(c, W)
            out.append(row)
        return out


def _targets(inst: RandomnessInstance):
    """Per constraint group: (p(m) weights, target law)."""
    src = inst.source
    if inst.conditional:
        pxy = src.exact_p_x_given_y()
        return [(pm, pxy[j]) for j, pm in enumerate(inst.p_m_given_y())]
    return [(inst.p_m(), src.exact_p_x())]


def feasible(inst: RandomnessInstance, W: int) -> Optional[tuple]:
    """Counts per y if |W| = W admits a perfect-perception decoder, else None."""
    groups = _targets(inst)
    per_group = []
    for pm, target in groups:
        P, Q = _integerize(pm, target)
        c = _feasible_counts(P, Q, W)
        if c is None:
            return None
        per_group.append(tuple(tuple(r) for r in c))
    if inst.conditional:
        return tuple(per_group)
    return tuple(per_group * inst.source.ny)


def min_common_randomness(inst: RandomnessInstance, bound: int = MAX_W,
                          raise_on_bound: bool = False) -> RandomnessResult:
    """Smallest uniform |W| <= bound admitting a deterministic perfect-perception decoder."""
    if bound > MAX_W:
        raise ValueError(f"search bound must be <= {MAX_W}")
    for W in range(1, bound + 1):
        c = feasible(inst, W)
        if c is not None:
            return RandomnessResult(inst, True, W, W, c)
    if raise_on_bound:
        raise SearchBoundExceeded(f"no decoder with |W| <= {bound}", bound)
    return RandomnessResult(inst, False, None, bound)


@dataclass(frozen=True)
class LowerBoundReport:
    name: str
    conditional: bool
    target_entropy: float
    rate: float
    bound: float
    min_w: Optional[int]
    log2_w: float          # log2 |W_min|, or log2(largest tried + 1) as a lower bound
    gap: float
    holds: bool
    exact_law_ok: bool

    def row(self) -> list:
        minw = self.min_w if self.min_w is not None else f">{int(round(2 ** self.log2_w)) - 1}"
        return [self.name, repr(self.target_entropy), repr(self.rate), repr(self.bound), minw,
                repr(self.log2_w), repr(self.gap)]


def verify_lowerbound(inst: RandomnessInstance, result: Optional[RandomnessResult] = None
                      ) -> LowerBoundReport:
    """Check log2 |W_min| >= H(X) - (R0 + 1) (H(X|Y) in conditional mode)."""
    if result is None:
        result = min_common_randomness(inst)
    b = inst.bound()
    if result.found:
        lw = math.log2(result.min_w)
        laws = result.exact_reconstruction_law()
        src = inst.source
        if inst.conditional:
            ok = laws == [list(r) for r in src.exact_p_x_given_y()]
        else:
            ok = all(row == list(src.exact_p_x()) for row in laws)
        # float cross-check through the shared marginalization code
        pushed = induced_laws(src, result.witness_kernel())
        target = src.p_x_given_y if inst.conditional else np.broadcast_to(src.p_x, (src.ny, src.nx))
        ok = ok and bool(np.max(np.abs(pushed.xhat_given_y - target)) <= 1e-12)
    else:
        lw = math.log2(result.largest_tried + 1)
        ok = True
    return LowerBoundReport(inst.name, inst.conditional, inst.target_entropy(),
                            float(inst.rate()), b, result.min_w, lw, lw - b,
                            bool(lw >= b - 1e-12), bool(ok))


def report_csv(reports: Sequence[LowerBoundReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance", "HX_bits", "R0_bits", "bound_bits", "minW", "log2W", "gap_bits"])
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# -- corpora ----------------------------------------------------------------------

def _composition(rng, total, parts):
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate(([0], cuts, [total]))).tolist()


def _random_encoder(rng, nx, ny, conditional):
    def one():
        k = int(rng.integers(1, nx + 1))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, size=nx - k)])
        rng.shuffle(labels)
        return labels
    if conditional:
        cols = [one() for _ in range(ny)]
        return tuple(tuple(int(cols[j][i]) for j in range(ny)) for i in range(nx))
    col = one()
    return tuple(tuple(int(col[i]) for _ in range(ny)) for i in range(nx))


def random_instance(rng: np.random.Generator, conditional: bool, name: str = "",
                    max_den: int = 24) -> RandomnessInstance:
    nx = int(rng.integers(2, 6))
    if not conditional:
        d = int(rng.integers(nx, max_den + 1))
        px = [Fraction(c, d) for c in _composition(rng, d, nx)]
        src = JointSource.from_rational([[p] for p in px], tuple(f"x{i}" for i in range(nx)),
                                        ("*",), np.arange(nx, dtype=float))
    else:
        ny = int(rng.integers(2, 4))
        dy = int(rng.integers(ny, 9))
        py = [Fraction(c, dy) for c in _composition(rng, dy, ny)]
        d = int(rng.integers(nx, max_den + 1))
        cols = [[Fraction(c, d) for c in _composition(rng, d, nx)] for _ in range(ny)]
        table = [[py[j] * cols[j][i] for j in range(ny)] for i in range(nx)]
        src = JointSource.from_rational(table, tuple(f"x{i}" for i in range(nx)),
                                        tuple(f"y{j}" for j in range(ny)),
                                        np.arange(nx, dtype=float))
    enc = _random_encoder(rng, src.nx, src.ny, conditional)
    if rng.random() < 0.5:
        return RandomnessInstance.with_huffman(src, enc, conditional, name)
    return RandomnessInstance.with_fixed_length(src, enc, conditional, name)


def instance_corpus(seed: int = 0, count: int = 200, conditional_share: float = 0.5) -> list:
    rng = np.random.default_rng(seed)
    n_cond = int(round(count * conditional_share))
    out = []
    for k in range(count):
        cond = k >= count - n_cond
        out.append(random_instance(rng, cond, f"{'cond' if cond else 'marg'}-{k:03d}"))
    return out


def quaternary_instances() -> list:
    """Uniform 4-ary source with a lossless code, one cell, and two halves."""
    q = Fraction(1, 4)
    src = JointSource.from_rational([[q], [q], [q], [q]], ("a", "b", "c", "d"), ("*",),
                                    np.arange(4, dtype=float))
    return [
        RandomnessInstance.with_huffman(src, ((0,), (1,), (2,), (3,)), name="lossless"),
        RandomnessInstance.with_fixed_length(src, ((0,), (0,), (0,), (0,)), name="one-cell"),
        RandomnessInstance.with_fixed_length(src, ((0,), (0,), (1,), (1,)), name="two-cells"),
    ]


# -- float32 Gaussian entropy --------------------------------------------------------

@dataclass(frozen=True)
class EntropyEstimate:
    bits: float
    se: float
    samples: int
    redraws: int
    quantizer: str


def _log2_cell_mass(lo, hi):
    """log2 of Phi(hi) - Phi(lo), accurate for tiny and tail cells."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    width = hi - lo
    mid = 0.5 * (lo + hi)
    # midpoint expansion: integral = phi(mid) h (1 + (mid^2 - 1) h^2 / 24 + O(h^4))
    small = width < 1e-3
    out = np.empty_like(mid)
    m, h = mid[small], width[small]
    out[small] = (-0.5 * m * m - 0.5 * math.log(2 * math.pi) + np.log(h)
                  + np.log1p((m * m - 1.0) * h * h / 24.0)) / math.log(2)
    lo_b, hi_b = lo[~small], hi[~small]
    upper = lo_b >= 0
    mass = np.where(upper,
                    0.5 * (special.erfc(lo_b / math.sqrt(2)) - special.erfc(hi_b / math.sqrt(2))),
                    0.5 * (special.erfc(-hi_b / math.sqrt(2)) - special.erfc(-lo_b / math.sqrt(2))))
    with np.errstate(divide="ignore"):
        out[~small] = np.log2(mass)
    return out


def _binary32_cells(w):
    w32 = w.astype(np.float32)
    prev = np.nextafter(w32, np.float32(-np.inf))
    nxt = np.nextafter(w32, np.float32(np.inf))
    c = w32.astype(float)
    lo = 0.5 * (prev.astype(float) + c)
    hi = 0.5 * (c + nxt.astype(float))
    return lo, hi


def _uniform_cells(w, delta, lo_edge, hi_edge):
    k = np.floor((w - lo_edge) / delta)
    lo = lo_edge + k * delta
    return lo, lo + delta


def float_gaussian_entropy(sample_count: int = 10 ** 6, quantizer="binary32", seed: int = 0,
                           delta: Optional[float] = None, value_range=(-8.0, 8.0)
                           ) -> EntropyEstimate:
    """Monte-Carlo -E[log2 p(w)] for N(0, 1) samples mapped to quantizer cells.

    ``quantizer="binary32"`` uses the cell halfway to the neighboring float32
    values; ``quantizer="uniform"`` uses cells of width ``delta`` tiling
    ``value_range``.
    """
    if sample_count < MIN_SAMPLES:
        raise ValueError(f"sample_count must be >= {MIN_SAMPLES}")
    rng = np.random.default_rng(seed)
    if quantizer == "binary32":
        cells = _binary32_cells
    elif quantizer == "uniform":
        if delta is None or delta <= 0:
            raise ValueError("uniform quantizer needs a positive delta")
        a, b = map(float, value_range)

        def cells(w):
            return _uniform_cells(w, delta, a, b)
    else:
        raise ValueError(f"unknown quantizer {quantizer!r}")
    vals = np.empty(0)
    redraws = 0
    while len(vals) < sample_count:
        n = sample_count - len(vals)
        w = rng.standard_normal(n)
        if quantizer == "uniform":
            keep = (w >= value_range[0]) & (w < value_range[1])
        else:
            keep = np.isfinite(w.astype(np.float32)) & (np.abs(w) > 0)
        lo, hi = cells(w[keep])
        lp = _log2_cell_mass(lo, hi)
        ok = np.isfinite(lp) & (hi > lo)
        redraws += int(n - keep.sum() + (~ok).sum())
        vals = np.concatenate([vals, -lp[ok]])
    return EntropyEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals))),
                           int(sample_count), redraws,
                           quantizer if quantizer == "binary32" else f"uniform({delta})")


def uniform_grid_entropy(delta: float, value_range=(-8.0, 8.0)) -> float:
    """Exact entropy (bits) of N(0,1) quantized to the uniform grid, by enumeration."""
    a, b = map(float, value_range)
    n = int(round((b - a) / delta))
    lo = a + delta * np.arange(n)
    lp = _log2_cell_mass(lo, lo + delta)
    p = np.exp2(lp)
    p = p / p.sum()
    return float(-(p * np.log2(p)).sum())
