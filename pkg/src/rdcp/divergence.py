"""Divergences between finite laws: total variation, KL (bits) and W2.

W2 is reported as the optimal squared-cost transport value, not its square
root.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .core import DivergenceSpec, JointSource, ReconstructionKernel, induced_laws

EQ_TOL = 1e-12


class AbsoluteContinuityError(ValueError):
    pass


def tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def kl(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise AbsoluteContinuityError("KL undefined: q(x)=0 where p(x)>0")
    return max(0.0, float(np.sum(p[nz] * (np.log2(p[nz]) - np.log2(q[nz])))))


def w2_1d(p, p_values, q, q_values) -> float:
    """Squared-cost transport between two laws on the real line.

    Uses the monotone (sorted) coupling, which is optimal for convex costs in
    one dimension.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    a = np.asarray(p_values, float)
    b = np.asarray(q_values, float)
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    a, p = a[ia], p[ia]
    b, q = b[ib], q[ib]
    cp = np.cumsum(p)
    cq = np.cumsum(q)
    cp[-1] = cq[-1] = 1.0
    cuts = np.unique(np.concatenate(([0.0], cp, cq)))
    cuts = cuts[(cuts >= 0.0) & (cuts <= 1.0)]
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    widths = np.diff(cuts)
    xa = a[np.minimum(np.searchsorted(cp, mids, side="right"), len(a) - 1)]
    xb = b[np.minimum(np.searchsorted(cq, mids, side="right"), len(b) - 1)]
    return float(np.sum(widths * (xa - xb) ** 2))


def w2_lp(p, p_values, q, q_values) -> float:
    """Squared-cost transport solved as an exact linear program."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    a = np.asarray(p_values, float).reshape(len(p), -1)
    b = np.asarray(q_values, float).reshape(len(q), -1)
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(0.0, float(res.fun))


def divergence(spec: DivergenceSpec, p, q, p_values=None, q_values=None) -> float:
    """d(p, q) for the family in ``spec``.

    TV and KL need equal support sizes. W2 needs embeddings on both sides and
    accepts different support sizes.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    fam = spec.family
    if fam == "w2":
        if p_values is None or q_values is None:
            raise ValueError("W2 requires embeddings for both laws")
        pv = np.asarray(p_values, float)
        qv = np.asarray(q_values, float)
        if len(pv) != len(p) or len(qv) != len(q):
            raise ValueError("embedding length does not match the law")
        if pv.ndim == 1 and qv.ndim == 1:
            return w2_1d(p, pv, q, qv)
        return w2_lp(p, pv, q, qv)
    if p.shape != q.shape:
        raise ValueError(f"mismatched supports: {p.shape} vs {q.shape}")
    if fam == "tv":
        return tv(p, q)
    return kl(p, q)


def align_by_id(p, p_ids, q, q_ids):
    """Place two laws on the union of their symbol ids (zero on missing ids)."""
    ids = list(p_ids) + [s for s in q_ids if s not in set(p_ids)]
    index = {s: i for i, s in enumerate(ids)}
    pa = np.zeros(len(ids))
    qa = np.zeros(len(ids))
    for s, v in zip(p_ids, p):
        pa[index[s]] += v
    for s, v in zip(q_ids, q):
        qa[index[s]] += v
    return pa, qa


def conditional_divergence(spec: DivergenceSpec, source: JointSource,
                           kernel: ReconstructionKernel):
    """Return (sum_y p(y) d(p_{X|y}, p_{Xhat|y}), per-y vector)."""
    laws = induced_laws(source, kernel)
    pxgy = source.p_x_given_y
    per_y = np.empty(source.ny)
    for j in range(source.ny):
        per_y[j] = _law_divergence(spec, pxgy[j], source.x_alphabet, source.x_values,
                                   laws.xhat_given_y[j], kernel.xhat_alphabet,
                                   kernel.xhat_values)
    return float(source.p_y @ per_y), per_y


def _law_divergence(spec, p, p_ids, p_values, q, q_ids, q_values) -> float:
    if spec.family == "w2":
        if p_values is None or q_values is None:
            raise ValueError("W2 requires embeddings on source and reconstruction alphabets")
        return divergence(spec, p, q, p_values, q_values)
    if tuple(p_ids) == tuple(q_ids):
        return divergence(spec, p, q)
    pa, qa = align_by_id(p, p_ids, q, q_ids)
    return divergence(spec, pa, qa)


def marginal_divergence(spec: DivergenceSpec, source: JointSource,
                        kernel: ReconstructionKernel) -> float:
    """Unconditional d(p_X, p_Xhat)."""
    laws = induced_laws(source, kernel)
    return _law_divergence(spec, source.p_x, source.x_alphabet, source.x_values,
                           laws.xhat, kernel.xhat_alphabet, kernel.xhat_values)


def law_divergence(spec: DivergenceSpec, p, q, p_ids=None, q_ids=None,
                   p_values: Optional[np.ndarray] = None,
                   q_values: Optional[np.ndarray] = None) -> float:
    """Public form of the id-aligned divergence used by the solvers."""
    if p_ids is None:
        p_ids = tuple(range(len(p)))
    if q_ids is None:
        q_ids = tuple(range(len(q)))
    return _law_divergence(spec, p, p_ids, p_values, q, q_ids, q_values)
