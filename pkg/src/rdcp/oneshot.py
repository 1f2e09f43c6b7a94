"""One-shot channel simulation with shared randomness.

The encoder and decoder share a candidate sequence drawn i.i.d. from a
reference law together with an increasing sequence of arrival times (sums of
unit exponentials). The encoder picks the candidate minimizing
``T_i / (q(c_i) / ref(c_i))`` (an exponential race), which is an exact sample
of the target ``q``, and sends its index with an Elias-delta code.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .coding import elias_delta_decode, elias_delta_encode, elias_delta_length
from .core import DivergenceSpec, JointSource, ReconstructionKernel, induced_laws
from .divergence import AbsoluteContinuityError, _law_divergence
from .measures import conditional_mutual_information

CANDIDATE_CAP = 10 ** 7
BLOCK = 64
BOUND_CONSTANT = 5.0


class CandidateCapError(RuntimeError):
    def __init__(self, msg, max_ratio):
        super().__init__(msg)
        self.max_ratio = max_ratio


class SharedRandomnessStream:
    """Deterministic per-trial candidate randomness.

    Trial ``t`` reads block ``b`` from ``SeedSequence(seed, spawn_key=(t, 1, b))``;
    each block holds BLOCK unit exponentials followed by BLOCK uniforms.
    Source draws for all trials come from the disjoint key ``(0,)``, indexed
    by trial number.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 64) - 1)

    def _gen(self, key):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def block(self, trial: int, b: int):
        g = self._gen((int(trial), 1, int(b)))
        return g.standard_exponential(BLOCK), g.random(BLOCK)

    def uniforms(self, trial: int, b: int):
        return self.block(trial, b)[1]

    def source_uniforms(self, trials: int) -> np.ndarray:
        return self._gen((0,)).random(int(trials))


def _inverse_cdf(cdf, u):
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def _cdf(p):
    c = np.cumsum(np.asarray(p, float))
    c[-1] = 1.0
    return c


def pfr_select(target, reference, stream: SharedRandomnessStream, trial: int = 0,
               cap: int = CANDIDATE_CAP):
    """Return (K, xhat index) selected by the exponential race (K is 1-based)."""
    target = np.asarray(target, float)
    reference = np.asarray(reference, float)
    if np.any((target > 0) & (reference <= 0)):
        raise ValueError("target is not absolutely continuous w.r.t. the reference")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(target > 0, target / np.where(reference > 0, reference, 1.0), 0.0)
    rmax = float(ratio.max())
    cdf = _cdf(reference)
    best, best_k, best_sym = math.inf, 0, -1
    t_acc = 0.0
    b = 0
    while True:
        e, u = stream.block(trial, b)
        T = t_acc + np.cumsum(e)
        t_acc = float(T[-1])
        sym = _inverse_cdf(cdf, u)
        r = ratio[sym]
        with np.errstate(divide="ignore"):
            score = np.where(r > 0, T / np.where(r > 0, r, 1.0), math.inf)
        i = int(np.argmin(score))            # lowest index on ties
        if score[i] < best:
            best, best_k, best_sym = float(score[i]), b * BLOCK + i + 1, int(sym[i])
        # later arrivals score at least T / rmax
        if T[-1] / rmax >= best:
            return best_k, best_sym
        b += 1
        if b * BLOCK >= cap:
            raise CandidateCapError(
                f"candidate cap {cap} exceeded (max density ratio {rmax:.6g})", rmax)


def pfr_decode(K: int, reference, stream: SharedRandomnessStream, trial: int = 0) -> int:
    """Regenerate the K-th candidate from the shared stream."""
    b, i = divmod(int(K) - 1, BLOCK)
    u = stream.uniforms(trial, b)[i]
    return int(_inverse_cdf(_cdf(reference), np.array([u]))[0])


@dataclass(frozen=True)
class IndexCode:
    K: int
    codeword: tuple

    @classmethod
    def of(cls, K: int) -> "IndexCode":
        return cls(int(K), elias_delta_encode(K).bits)

    def __len__(self):
        return len(self.codeword)


@dataclass(frozen=True)
class ChiSquareCell:
    x: object
    y: object
    n: int
    statistic: float
    dof: int
    pvalue: float


@dataclass(eq=False)
class OneshotReport:
    trials: int
    seed: int
    information: float
    bound: float
    mean_codelength: float
    se_codelength: float
    bound_holds: bool
    per_y_distortion: np.ndarray
    per_y_distortion_se: np.ndarray
    expected_per_y_distortion: Optional[np.ndarray]
    empirical_divergence: Optional[float]
    per_y_divergence: Optional[np.ndarray]
    chi_square: list
    cap_failures: int
    decoder_mismatches: int
    records: np.ndarray = field(repr=False)   # trial, y, x, xhat, K, codelen

    @property
    def min_pvalue(self) -> float:
        ps = [c.pvalue for c in self.chi_square if c.dof > 0]
        return min(ps) if ps else 1.0

    def chi_square_passes(self, alpha: float = 1e-3) -> bool:
        return all(c.pvalue >= alpha for c in self.chi_square if c.dof > 0)

    def above_optimum(self, optimum: float, n_se: float = 3.0) -> bool:
        return self.mean_codelength >= optimum - n_se * self.se_codelength

    def summary(self) -> dict:
        return {
            "trials": self.trials,
            "seed": self.seed,
            "information_bits": self.information,
            "bound_bits": self.bound,
            "mean_codelength_bits": self.mean_codelength,
            "se_codelength_bits": self.se_codelength,
            "bound_holds": self.bound_holds,
            "per_y_distortion": [float(v) for v in self.per_y_distortion],
            "per_y_distortion_se": [float(v) for v in self.per_y_distortion_se],
            "empirical_divergence": self.empirical_divergence,
            "chi_square_min_pvalue": self.min_pvalue,
            "cap_failures": self.cap_failures,
            "decoder_mismatches": self.decoder_mismatches,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def trial_csv(self, source: JointSource, kernel: ReconstructionKernel) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "y", "x", "xhat", "K", "codelen_bits"])
        for t, j, i, k, K, L in self.records:
            if K == 0:
                continue
            w.writerow([int(t), source.y_alphabet[j], source.x_alphabet[i],
                        kernel.xhat_alphabet[k], int(K), int(L)])
        return buf.getvalue()


def oneshot_bound(information: float, constant: float = BOUND_CONSTANT) -> float:
    return information + math.log2(information + 1.0) + constant


def simulate_oneshot(source: JointSource, kernel: ReconstructionKernel,
                     divergence: Optional[DivergenceSpec] = None, trials: int = 10 ** 4,
                     seed: int = 0, distortion=None, cap: int = CANDIDATE_CAP,
                     check_decoder: bool = True) -> OneshotReport:
    """Simulate ``trials`` independent one-shot transmissions through ``kernel``."""
    kernel.check_compatible(source)
    if trials < 1:
        raise ValueError("trials must be positive")
    stream = SharedRandomnessStream(seed)
    laws = induced_laws(source, kernel, distortion)
    ref = laws.xhat_given_y                       # (|Y|, |Xhat|)
    flat = source.pmf.ravel()                     # index = x * |Y| + y
    cdf = _cdf(flat)
    rec = np.zeros((trials, 6), dtype=np.int64)
    failures = mismatches = 0
    cells = _inverse_cdf(cdf, stream.source_uniforms(trials))
    for t in range(trials):
        i, j = divmod(int(cells[t]), source.ny)
        try:
            K, k = pfr_select(kernel.q[i, j], ref[j], stream, t, cap)
        except CandidateCapError:
            failures += 1
            rec[t] = (t, j, i, -1, 0, 0)
            continue
        if check_decoder:
            word = elias_delta_encode(K)
            K_dec, _ = elias_delta_decode(word)
            if pfr_decode(K_dec, ref[j], stream, t) != k:
                mismatches += 1
        rec[t] = (t, j, i, k, K, elias_delta_length(K))
    ok = rec[:, 4] > 0
    good = rec[ok]
    lengths = good[:, 5].astype(float)
    n = len(lengths)
    mean = float(lengths.mean()) if n else math.nan
    se = float(lengths.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    info = float(conditional_mutual_information(laws.joint))
    bound = oneshot_bound(info)

    py_d = np.full(source.ny, math.nan)
    py_se = np.full(source.ny, math.nan)
    if distortion is not None:
        dvals = distortion.table[good[:, 2], good[:, 3]]
        for j in range(source.ny):
            sel = dvals[good[:, 1] == j]
            if len(sel):
                py_d[j] = sel.mean()
                py_se[j] = sel.std(ddof=1) / math.sqrt(len(sel)) if len(sel) > 1 else math.nan

    emp_div = per_y_div = None
    if divergence is not None:
        per_y_div = np.full(source.ny, math.nan)
        pxgy = source.p_x_given_y
        for j in range(source.ny):
            sel = good[good[:, 1] == j, 3]
            if not len(sel):
                continue
            emp = np.bincount(sel, minlength=kernel.nxhat) / len(sel)
            try:
                per_y_div[j] = _law_divergence(divergence, pxgy[j], source.x_alphabet,
                                               source.x_values, emp, kernel.xhat_alphabet,
                                               kernel.xhat_values)
            except AbsoluteContinuityError:
                per_y_div[j] = math.inf
        emp_div = float(np.nansum(source.p_y * per_y_div))

    chi = []
    for i in range(source.nx):
        for j in range(source.ny):
            sel = good[(good[:, 2] == i) & (good[:, 1] == j), 3]
            if not len(sel):
                continue
            chi.append(_chi_square(source.x_alphabet[i], source.y_alphabet[j], sel,
                                   kernel.q[i, j]))
    return OneshotReport(trials, int(seed), info, bound, mean, se, bool(mean <= bound),
                         py_d, py_se, laws.distortion_per_y, emp_div, per_y_div, chi,
                         failures, mismatches, rec)


def _chi_square(x, y, samples, q) -> ChiSquareCell:
    n = len(samples)
    counts = np.bincount(samples, minlength=len(q))
    support = q > 0
    if np.any(counts[~support]):
        return ChiSquareCell(x, y, n, math.inf, int(support.sum()) - 1, 0.0)
    obs = counts[support]
    exp = q[support] * n
    if len(obs) < 2:
        return ChiSquareCell(x, y, n, 0.0, 0, 1.0)
    exp = exp * (obs.sum() / exp.sum())
    stat, p = stats.chisquare(obs, exp)
    return ChiSquareCell(x, y, n, float(stat), len(obs) - 1, float(p))
