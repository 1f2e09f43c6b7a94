"""Discrete conditional codec: lossless Y, partition MSE codec for X given Y,
posterior-sampling perceptual decoder, overhead audit and the
distortion-perception traversal X_a = (1 - a) Xhat + a Xtilde.

Labels of M are global. In conditional designs every y owns a contiguous
block of labels (so M determines Y); the arithmetic coder codes the position
inside that block under the y-context model.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .coding import (Bitstream, FrequencyModel, PrefixCode, ac_decode, ac_decode_prefix,
                     ac_encode, huffman_build)
from .core import DivergenceSpec, JointSource, parse_source, source_to_dict
from .divergence import divergence as _divergence
from .measures import entropy

PIPELINE_FORMAT = "rdcp-pipeline"
PIPELINE_VERSION = 1
EXHAUSTIVE_LIMIT = 8
POSTERIOR_TOL = 1e-12


class NotPosteriorMeanError(ValueError):
    pass


class NondeterministicSideInfoError(ValueError):
    pass


# -- partitions ------------------------------------------------------------------

@lru_cache(maxsize=64)
def set_partitions(n: int, k: int) -> np.ndarray:
    """Restricted-growth strings of length n with at most k blocks, lexicographic."""
    out = []

    def rec(prefix, m):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for b in range(min(m + 1, k)):
            prefix.append(b)
            rec(prefix, max(m, b + 1))
            prefix.pop()

    if n == 0:
        return np.zeros((1, 0), dtype=int)
    rec([], 0)
    return np.array(out, dtype=int)


def _partition_costs(labels: np.ndarray, w: np.ndarray, v: np.ndarray, k: int) -> np.ndarray:
    """Within-cell squared error for each partition; w is (n, ny) mass, v is (n,)."""
    onehot = (labels[:, :, None] == np.arange(k)[None, None, :]).astype(float)  # (P, n, k)
    S = np.einsum("pnk,ny->pky", onehot, w)
    T = np.einsum("pnk,ny->pky", onehot, w * v[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(S > 0, T * T / np.where(S > 0, S, 1.0), 0.0).sum(axis=(1, 2))
    return float((w * (v * v)[:, None]).sum()) - between


def _best_partition(w, v, k):
    labels = set_partitions(len(v), k)
    cost = _partition_costs(labels, w, v, k)
    best = cost.min()
    i = int(np.flatnonzero(cost <= best + 1e-12 * (1.0 + abs(best)))[0])
    return labels[i]


def _lloyd_partition(w, v, k, iters=200):
    """Weighted Lloyd alternation from quantile cells (locally optimal)."""
    n = len(v)
    order = np.argsort(v, kind="stable")
    mass = w.sum(axis=1)[order]
    cum = np.cumsum(mass) / mass.sum()
    labels = np.empty(n, dtype=int)
    labels[order] = np.minimum((cum * k - 1e-12).astype(int), k - 1)
    for _ in range(iters):
        S = np.stack([w[labels == c].sum(axis=0) for c in range(k)])           # (k, ny)
        T = np.stack([(w * v[:, None])[labels == c].sum(axis=0) for c in range(k)])
        with np.errstate(divide="ignore", invalid="ignore"):
            means = np.where(S > 0, T / np.where(S > 0, S, 1.0), np.inf)
        cost = np.einsum("ny,nky->nk", w, (v[:, None, None] - means[None, :, :]) ** 2
                         * np.isfinite(means)[None]) + np.where(
            np.all(~np.isfinite(means), axis=1), np.inf, 0.0)[None, :]
        new = np.argmin(cost, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    # compact to restricted growth form
    remap = {}
    return np.array([remap.setdefault(c, len(remap)) for c in labels], dtype=int)


# -- pipeline --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CodecPipeline:
    source: JointSource
    assign: np.ndarray           # (|X|, |Y|) global label of each (x, y)
    n_labels: int
    offsets: tuple               # first global label coded under each y
    sizes: tuple                 # labels coded under each y
    g1: np.ndarray               # (n_labels, |Y|) reconstruction value
    m_models: tuple              # FrequencyModel per y over the local labels
    y_code: PrefixCode
    conditional: bool
    budget: int
    method: str
    g2: Optional[np.ndarray] = None   # (n_labels, |Y|, |X|) posterior rows

    # -- exact laws --
    @property
    def joint_m_y(self) -> np.ndarray:
        """p(m, y), shape (n_labels, |Y|)."""
        out = np.zeros((self.n_labels, self.source.ny))
        for j in range(self.source.ny):
            np.add.at(out[:, j], self.assign[:, j], self.source.pmf[:, j])
        return out

    def posterior_means(self) -> np.ndarray:
        return _posterior(self.source, self.assign, self.n_labels)[0]

    def posterior_rows(self) -> np.ndarray:
        return _posterior(self.source, self.assign, self.n_labels)[1]

    def live(self) -> np.ndarray:
        return self.joint_m_y > 0

    def local_label(self, m: int, j: int) -> int:
        loc = m - self.offsets[j]
        if not 0 <= loc < self.sizes[j]:
            raise ValueError(f"label {m} is not coded under y index {j}")
        return loc

    def mse_per_y(self) -> np.ndarray:
        v = self.source.x_values
        xh = self.g1[self.assign, np.arange(self.source.ny)[None, :]]        # (|X|, |Y|)
        return (self.source.pmf * (v[:, None] - xh) ** 2).sum(axis=0) / self.source.p_y

    def mse(self) -> float:
        return float(self.source.p_y @ self.mse_per_y())

    def _need_g2(self):
        if self.g2 is None:
            raise ValueError("pipeline has no perceptual decoder; call attach_posterior_decoder")

    def perceptual_law_given_y(self) -> np.ndarray:
        """p_{Xtilde | y}, shape (|Y|, |X|), computed exactly."""
        self._need_g2()
        pmy = self.joint_m_y
        return np.einsum("my,myx->yx", pmy, self.g2) / self.source.p_y[:, None]

    def perceptual_law(self) -> np.ndarray:
        return self.source.p_y @ self.perceptual_law_given_y()

    def perceptual_mse_per_y(self) -> np.ndarray:
        self._need_g2()
        v = self.source.x_values
        out = np.zeros(self.source.ny)
        for j in range(self.source.ny):
            rows = self.g2[self.assign[:, j], j, :]                           # (|X|, |X|)
            out[j] = (self.source.pmf[:, j][:, None] * rows
                      * (v[:, None] - v[None, :]) ** 2).sum()
        return out / self.source.p_y

    def dead_codes(self) -> list:
        """(label, y index) pairs coded under y that no positive-mass x reaches."""
        pmy = self.joint_m_y
        return [(self.offsets[j] + c, j) for j in range(self.source.ny)
                for c in range(self.sizes[j]) if pmy[self.offsets[j] + c, j] <= 0]

    def with_decoder(self, g1) -> "CodecPipeline":
        return replace(self, g1=np.asarray(g1, float), g2=None)

    # -- serialization --
    def to_dict(self) -> dict:
        d = {
            "format": PIPELINE_FORMAT,
            "version": PIPELINE_VERSION,
            "source": source_to_dict(self.source),
            "conditional": self.conditional,
            "budget": self.budget,
            "method": self.method,
            "n_labels": self.n_labels,
            "offsets": list(self.offsets),
            "sizes": list(self.sizes),
            "assign": self.assign.tolist(),
            "g1": self.g1.tolist(),
            "m_models": [list(m.counts) for m in self.m_models],
            "y_code": ["".join(map(str, c)) for c in self.y_code.codewords],
        }
        d["g2"] = None if self.g2 is None else self.g2.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecPipeline":
        if d.get("format") != PIPELINE_FORMAT:
            raise ValueError("not a pipeline document")
        if d.get("version") != PIPELINE_VERSION:
            raise ValueError(f"unsupported pipeline version {d.get('version')!r}")
        src = parse_source(d["source"], "pipeline.source")
        models = tuple(FrequencyModel(tuple(c), context=j) for j, c in enumerate(d["m_models"]))
        code = PrefixCode(tuple(tuple(int(b) for b in w) for w in d["y_code"]))
        g2 = None if d["g2"] is None else np.asarray(d["g2"], float)
        return cls(src, np.asarray(d["assign"], int), int(d["n_labels"]),
                   tuple(d["offsets"]), tuple(d["sizes"]), np.asarray(d["g1"], float),
                   models, code, bool(d["conditional"]), int(d["budget"]), d["method"], g2)

    @classmethod
    def from_json(cls, text: str) -> "CodecPipeline":
        return cls.from_dict(json.loads(text))


def _posterior(source, assign, n_labels):
    nx, ny = source.nx, source.ny
    v = source.x_values
    pm = np.zeros((n_labels, ny))
    rows = np.zeros((n_labels, ny, nx))
    for j in range(ny):
        for i in range(nx):
            pm[assign[i, j], j] += source.pmf[i, j]
            rows[assign[i, j], j, i] += source.pmf[i, j]
    # unconditional fallback for labels without mass under y
    cell = np.zeros((n_labels, nx))
    for j in range(ny):
        cell += rows[:, j, :]
    means = np.zeros((n_labels, ny))
    for m in range(n_labels):
        for j in range(ny):
            if pm[m, j] > 0:
                rows[m, j] /= pm[m, j]
            elif cell[m].sum() > 0:
                rows[m, j] = cell[m] / cell[m].sum()
            else:
                rows[m, j] = np.asarray([1.0 if assign[i, j] == m else 0.0
                                         for i in range(nx)])
                rows[m, j] /= max(rows[m, j].sum(), 1.0)
            means[m, j] = rows[m, j] @ v
    return means, rows


def design_mse_codec(source: JointSource, m_budget: int, conditional: bool = True
                     ) -> CodecPipeline:
    """Partition codec minimizing sum_y p(y) E[(X - E[X | cell, y])^2 | y].

    Exhaustive over set partitions when the alphabet (support per y in
    conditional mode) has at most 8 symbols, Lloyd alternation otherwise.
    """
    if source.x_values is None:
        raise ValueError("MSE codec design needs real embeddings for X")
    if m_budget < 1:
        raise ValueError("|M| budget must be >= 1")
    v = np.asarray(source.x_values, float)
    nx, ny = source.nx, source.ny
    if m_budget > nx:
        warnings.warn(f"|M| budget {m_budget} exceeds |X| = {nx}; clamped to {nx}",
                      stacklevel=2)
        m_budget = nx
    assign = np.zeros((nx, ny), dtype=int)
    methods = set()
    if conditional:
        offsets, sizes = [], []
        nxt = 0
        for j in range(ny):
            sup = np.flatnonzero(source.pmf[:, j] > 0)
            k = _clamp(m_budget, len(sup))
            w = source.pmf[sup, j][:, None]
            lab, meth = _partition(w, v[sup], k)
            methods.add(meth)
            ncell = int(lab.max()) + 1
            means = np.array([np.average(v[sup][lab == c], weights=w[lab == c, 0])
                              for c in range(ncell)])
            rank = np.argsort(np.argsort(means, kind="stable"), kind="stable")
            local = rank[lab]
            full = np.empty(nx, dtype=int)
            full[sup] = local
            off = np.setdiff1d(np.arange(nx), sup)
            sorted_means = np.sort(means)
            for i in off:
                full[i] = int(np.argmin(np.abs(sorted_means - v[i])))
            assign[:, j] = nxt + full
            offsets.append(nxt)
            sizes.append(ncell)
            nxt += ncell
        n_labels = nxt
    else:
        sup = np.flatnonzero(source.p_x > 0)
        k = _clamp(m_budget, len(sup))
        w = source.pmf[sup, :]
        lab, meth = _partition(w, v[sup], k)
        methods.add(meth)
        ncell = int(lab.max()) + 1
        wx = w.sum(axis=1)
        means = np.array([np.average(v[sup][lab == c], weights=wx[lab == c])
                          for c in range(ncell)])
        rank = np.argsort(np.argsort(means, kind="stable"), kind="stable")
        full = np.empty(nx, dtype=int)
        full[sup] = rank[lab]
        sorted_means = np.sort(means)
        for i in np.setdiff1d(np.arange(nx), sup):
            full[i] = int(np.argmin(np.abs(sorted_means - v[i])))
        assign[:, :] = full[:, None]
        n_labels = ncell
        offsets, sizes = [0] * ny, [ncell] * ny
    g1, _ = _posterior(source, assign, n_labels)
    pipe = CodecPipeline(source, assign, n_labels, tuple(offsets), tuple(sizes), g1,
                         (), huffman_build(source.p_y), conditional, int(m_budget),
                         "exhaustive" if methods == {"exhaustive"} else "lloyd")
    return replace(pipe, m_models=_m_models(pipe))


def _clamp(budget, n):
    # a y whose support is smaller than the budget simply uses fewer cells
    return min(budget, n)


def _partition(w, v, k):
    if len(v) <= EXHAUSTIVE_LIMIT:
        return _best_partition(w, v, k), "exhaustive"
    return _lloyd_partition(w, v, k), "lloyd"


def _m_models(pipe: CodecPipeline) -> tuple:
    pmy = pipe.joint_m_y
    models = []
    for j in range(pipe.source.ny):
        block = pmy[pipe.offsets[j]:pipe.offsets[j] + pipe.sizes[j], j]
        models.append(FrequencyModel.from_pmf(block, context=j))
    return tuple(models)


def attach_posterior_decoder(pipeline: CodecPipeline, source: Optional[JointSource] = None
                             ) -> CodecPipeline:
    """Add g2 = exact posterior p_{X | M, Y}; rejects a g1 that is not posterior-mean."""
    source = pipeline.source if source is None else source
    means, rows = _posterior(source, pipeline.assign, pipeline.n_labels)
    live = pipeline.live()
    err = np.abs(pipeline.g1 - means)[live]
    if err.size and err.max() > POSTERIOR_TOL:
        raise NotPosteriorMeanError(
            f"g1 deviates from the posterior mean by {err.max():.3g}; "
            "the doubling guarantee needs a posterior-mean decoder")
    return replace(pipeline, source=source, g2=rows)


# -- instance coding ---------------------------------------------------------------

@dataclass(frozen=True)
class EncodedInstance:
    y_bits: Bitstream
    m_bits: Bitstream

    @property
    def bits(self) -> Bitstream:
        return self.y_bits + self.m_bits


@dataclass(frozen=True)
class ReconstructionRecord:
    x: Optional[object]
    y: object
    m: int
    xhat: float
    xtilde: Optional[float]
    x_alpha: float
    alpha: float
    bits_y: int
    bits_m: int


def _index(alphabet, sym, what):
    try:
        return alphabet.index(sym)
    except ValueError:
        raise KeyError(f"{what} {sym!r} not in alphabet {alphabet}") from None


def encode_instance(pipeline: CodecPipeline, x, y) -> EncodedInstance:
    src = pipeline.source
    i = _index(src.x_alphabet, x, "x")
    j = _index(src.y_alphabet, y, "y")
    m = int(pipeline.assign[i, j])
    return EncodedInstance(pipeline.y_code.encode(j),
                           ac_encode([pipeline.local_label(m, j)], pipeline.m_models[j]))


def _reconstruct(pipeline, j, m, alpha, rng, bits_y, bits_m, x=None):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    xhat = float(pipeline.g1[m, j])
    xtilde = None
    if pipeline.g2 is not None:
        v = pipeline.source.x_values
        xtilde = float(v[rng.choice(pipeline.source.nx, p=pipeline.g2[m, j])])
    elif alpha > 0:
        raise ValueError("alpha > 0 needs the perceptual decoder")
    if alpha == 0.0:
        xa = xhat
    elif alpha == 1.0:
        xa = xtilde
    else:
        xa = (1.0 - alpha) * xhat + alpha * xtilde
    return ReconstructionRecord(x, pipeline.source.y_alphabet[j], int(m), xhat, xtilde, xa,
                                float(alpha), bits_y, bits_m)


def decode_instance(pipeline: CodecPipeline, streams: EncodedInstance, alpha: float = 0.0,
                    seed: int = 0) -> ReconstructionRecord:
    """Decode Y, then M under the y-context model, then reconstruct."""
    j, pos = pipeline.y_code.decode(streams.y_bits)
    if pos != len(streams.y_bits):
        raise ValueError("trailing bits after the Y codeword")
    loc = ac_decode(streams.m_bits, pipeline.m_models[j], 1)[0]
    m = pipeline.offsets[j] + loc
    return _reconstruct(pipeline, j, m, alpha, np.random.default_rng(seed),
                        len(streams.y_bits), len(streams.m_bits))


def encode_batch(pipeline: CodecPipeline, pairs: Sequence) -> tuple:
    """Concatenate (Y codeword, M codeword) per instance; returns (stream, per-instance sizes)."""
    parts, sizes = [], []
    for x, y in pairs:
        e = encode_instance(pipeline, x, y)
        parts.append(e.bits)
        sizes.append((len(e.y_bits), len(e.m_bits)))
    bits: tuple = ()
    for p in parts:
        bits += p.bits
    return Bitstream(bits), sizes


def decode_batch(pipeline: CodecPipeline, stream: Bitstream, count: int, alpha: float = 0.0,
                 seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    pos = 0
    out = []
    for _ in range(count):
        j, p1 = pipeline.y_code.decode(stream, pos)
        (loc,), p2 = ac_decode_prefix(stream, pipeline.m_models[j], 1, p1)
        out.append(_reconstruct(pipeline, j, pipeline.offsets[j] + loc, alpha, rng,
                                p1 - pos, p2 - p1))
        pos = p2
    if pos != len(stream):
        raise ValueError(f"{len(stream) - pos} trailing bits after {count} instances")
    return out


def transmit(pipeline: CodecPipeline, x, y, alpha: float = 0.0, seed: int = 0
             ) -> ReconstructionRecord:
    rec = decode_instance(pipeline, encode_instance(pipeline, x, y), alpha, seed)
    return replace(rec, x=x)


# -- overhead audit ----------------------------------------------------------------

@dataclass(frozen=True)
class OverheadReport:
    R: float        # Huffman code for M ignoring Y
    R_M: float      # per-y Huffman codes for M
    R_Y: float      # Huffman code for Y
    slack: float    # R + 2 - (R_M + R_Y)
    H_M: float
    H_M_given_Y: float
    H_Y: float
    H_Y_given_M: float
    R_M_arith: float
    holds: bool
    identity_gap: float   # |H(M|Y) + H(Y) - H(M)|

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _huffman_expected(p) -> float:
    p = np.asarray(p, float)
    p = p[p > 0]
    p = p / p.sum()
    return huffman_build(p).expected_length(p)


def overhead_audit(pipeline: CodecPipeline, source: Optional[JointSource] = None
                   ) -> OverheadReport:
    source = pipeline.source if source is None else source
    if not source.is_y_deterministic():
        raise NondeterministicSideInfoError("Y is not a deterministic function of X")
    pipeline._need_g2()
    pmy = pipeline.joint_m_y
    pm = pmy.sum(axis=1)
    py = source.p_y
    R = _huffman_expected(pm)
    R_Y = _huffman_expected(py)
    R_M = float(sum(py[j] * _huffman_expected(pmy[:, j] / py[j]) for j in range(source.ny)))
    R_M_arith = 0.0
    for j in range(source.ny):
        for c in range(pipeline.sizes[j]):
            w = pmy[pipeline.offsets[j] + c, j]
            if w > 0:
                R_M_arith += w * len(ac_encode([c], pipeline.m_models[j]))
    H_M = entropy(pm)
    H_Y = entropy(py)
    H_MY = entropy(pmy)
    H_M_given_Y = H_MY - H_Y
    H_Y_given_M = H_MY - H_M
    return OverheadReport(R, R_M, R_Y, R + 2.0 - (R_M + R_Y), H_M, H_M_given_Y, H_Y,
                          H_Y_given_M, float(R_M_arith), bool(R_M + R_Y <= R + 2.0 + 1e-12),
                          abs(H_M_given_Y + H_Y - H_M))


# -- distortion-perception traversal ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraversalPoint:
    alpha: float
    mse: float              # exact, from the law of (X, X_alpha)
    mse_predicted: float    # (1 + alpha^2) * MSE(Xhat)
    mse_mc: float
    mse_se: float
    divergence: float
    per_y_divergence: np.ndarray

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.mse_mc - self.mse_predicted) <= n_se * self.mse_se + 1e-12


@dataclass(frozen=True, eq=False)
class TraversalCurve:
    points: tuple
    family: str
    monotonicity_violations: tuple    # (alpha_prev, alpha, increase)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "mse", "divergence", "mse_predicted"])
        for p in self.points:
            w.writerow([repr(float(p.alpha)), repr(float(p.mse)), repr(float(p.divergence)),
                        repr(float(p.mse_predicted))])
        return buf.getvalue()


def _alpha_law(pipeline: CodecPipeline, j: int, alpha: float):
    """Atoms (values, masses) of X_alpha given y index j."""
    src = pipeline.source
    v = src.x_values
    pm = pipeline.joint_m_y[:, j] / src.p_y[j]
    vals, mass = [], []
    for m in np.flatnonzero(pm > 0):
        xh = pipeline.g1[m, j]
        for i in np.flatnonzero(pipeline.g2[m, j] > 0):
            if alpha == 1.0:
                vals.append(float(v[i]))
            else:
                vals.append((1.0 - alpha) * xh + alpha * float(v[i]))
            mass.append(pm[m] * pipeline.g2[m, j, i])
    return np.array(vals), np.array(mass)


def _merge_atoms(vals, mass, decimals=12):
    keys = np.round(vals, decimals)
    uniq, inv = np.unique(keys, return_inverse=True)
    return uniq, np.bincount(inv, weights=mass, minlength=len(uniq))


def _value_divergence(spec, pv, pm, qv, qm):
    if spec.family == "w2":
        return _divergence(spec, pm, qm, pv, qv)
    a, am = _merge_atoms(pv, pm)
    b, bm = _merge_atoms(qv, qm)
    support = np.union1d(a, b)
    pa = np.zeros(len(support))
    qa = np.zeros(len(support))
    pa[np.searchsorted(support, a)] = am
    qa[np.searchsorted(support, b)] = bm
    if spec.family == "kl":
        nz = pa > 0
        if np.any(qa[nz] <= 0):
            return math.inf
    return _divergence(spec, pa, qa)


def dp_traversal(pipeline: CodecPipeline, alphas: Sequence[float] = tuple(np.linspace(0, 1, 11)),
                 divergence: Optional[DivergenceSpec] = None, trials: int = 10 ** 5,
                 seed: int = 0) -> TraversalCurve:
    """Sweep X_alpha = (1 - alpha) Xhat + alpha Xtilde on one decoded M."""
    pipeline._need_g2()
    spec = divergence or DivergenceSpec("w2")
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alpha must lie in [0, 1]")
    src = pipeline.source
    v = src.x_values
    mse_hat = pipeline.mse()
    rng = np.random.default_rng(seed)
    # Monte-Carlo draws shared across alpha
    flat = src.pmf.ravel()
    cells = rng.choice(flat.size, size=trials, p=flat / flat.sum())
    xi, yj = np.divmod(cells, src.ny)
    m = pipeline.assign[xi, yj]
    rows = pipeline.g2[m, yj]                              # (trials, |X|)
    u = rng.random(trials)
    cdf = np.cumsum(rows, axis=1)
    cdf[:, -1] = 1.0
    xt = v[(cdf <= u[:, None]).sum(axis=1)]
    xs = v[xi]
    xh = pipeline.g1[m, yj]
    points = []
    for a in alphas:
        # exact MSE over the joint law of (X, M, Y, Xtilde)
        exact = 0.0
        for j in range(src.ny):
            for i in range(src.nx):
                w = src.pmf[i, j]
                if w <= 0:
                    continue
                mm = pipeline.assign[i, j]
                xa = (1.0 - a) * pipeline.g1[mm, j] + a * v
                if a == 1.0:
                    xa = v
                exact += w * float(pipeline.g2[mm, j] @ (v[i] - xa) ** 2)
        xa_mc = xt if a == 1.0 else (1.0 - a) * xh + a * xt
        err = (xs - xa_mc) ** 2
        per_y = np.zeros(src.ny)
        for j in range(src.ny):
            av, am = _alpha_law(pipeline, j, a)
            per_y[j] = _value_divergence(spec, v, src.p_x_given_y[j], av, am)
        points.append(TraversalPoint(a, exact, (1.0 + a * a) * mse_hat, float(err.mean()),
                                     float(err.std(ddof=1) / math.sqrt(trials)),
                                     float(src.p_y @ per_y), per_y))
    ordered = sorted(points, key=lambda p: p.alpha)
    viol = tuple((p.alpha, q.alpha, q.divergence - p.divergence)
                 for p, q in zip(ordered, ordered[1:]) if q.divergence > p.divergence + 1e-12)
    return TraversalCurve(tuple(points), spec.family, viol)


# -- random corpora ---------------------------------------------------------------------

def random_embedded_source(rng: np.random.Generator, nx=(2, 6), ny=(1, 3),
                           deterministic_y: bool = False) -> JointSource:
    """Random source with distinct sorted real values; optionally Y = f(X)."""
    n = int(rng.integers(nx[0], nx[1] + 1))
    k = int(rng.integers(ny[0], min(ny[1], n) + 1))
    values = np.sort(rng.choice(np.arange(-20, 21), size=n, replace=False)).astype(float) / 4.0
    px = rng.dirichlet(np.ones(n))
    px = np.maximum(px, 1e-3)
    px /= px.sum()
    if deterministic_y:
        fy = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        rng.shuffle(fy)
        pmf = np.zeros((n, k))
        pmf[np.arange(n), fy] = px
    else:
        pmf = px[:, None] * rng.dirichlet(np.ones(k), size=n)
        pmf = np.maximum(pmf, 1e-4)
        pmf /= pmf.sum()
    return JointSource(tuple(f"x{i}" for i in range(n)), tuple(f"y{j}" for j in range(k)),
                       pmf, values)


def random_pipeline(rng: np.random.Generator, deterministic_y: bool = False,
                    conditional: bool = True) -> CodecPipeline:
    src = random_embedded_source(rng, deterministic_y=deterministic_y)
    budget = int(rng.integers(1, src.nx + 1))
    return attach_posterior_decoder(design_mse_codec(src, budget, conditional))
