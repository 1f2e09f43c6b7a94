"""Grid-enumeration oracle for the trade-off functions on tiny instances.

Every kernel whose rows are compositions of ``1/resolution`` quanta is
evaluated. The minimum over feasible grid kernels is an upper envelope of the
true optimum; the minimum with constraints relaxed by the grid's rounding
slack gives the lower envelope. ``gap`` is their difference.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import DistortionSpec, DivergenceSpec, JointSource, ReconstructionKernel
from .solver import InfeasibleError, TradeoffQuery, is_unconstrained

MAX_GRID_POINTS = 10 ** 7
CHUNK = 200_000


class InstanceTooLargeError(ValueError):
    pass


class EmptyFeasibleGridError(InfeasibleError):
    pass


@dataclass(frozen=True, eq=False)
class BruteForceResult:
    rate: float            # upper envelope (best feasible grid kernel)
    lower: float           # lower envelope (relaxed constraints)
    gap: float
    kernel: ReconstructionKernel
    grid_points: int


def simplex_grid(k: int, n: int) -> np.ndarray:
    """All k-part compositions of n, scaled to the simplex; lexicographic order."""
    rows = []
    for bars in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(n + k - 2 - prev)
        rows.append(parts)
    rows.sort(reverse=True)
    return np.array(rows, dtype=float) / n


def _batch_w2(p, a, R, b):
    """W2 between fixed law (p on values a) and each row of R (on values b)."""
    ia = np.argsort(a, kind="stable")
    a, p = a[ia], p[ia]
    ib = np.argsort(b, kind="stable")
    b, R = b[ib], R[:, ib]
    cp = np.cumsum(p)
    cp[-1] = 1.0
    cq = np.cumsum(R, axis=1)
    cq[:, -1] = 1.0
    B = R.shape[0]
    cuts = np.sort(np.concatenate([np.zeros((B, 1)), np.broadcast_to(cp, (B, len(cp))), cq],
                                  axis=1), axis=1)
    mids = 0.5 * (cuts[:, :-1] + cuts[:, 1:])
    widths = np.diff(cuts, axis=1)
    xa = a[np.minimum(np.searchsorted(cp, mids, side="right"), len(a) - 1)]
    idx = (cq[:, :, None] <= mids[:, None, :]).sum(axis=1)
    xb = b[np.minimum(idx, len(b) - 1)]
    return np.sum(widths * (xa - xb) ** 2, axis=1)


class _Evaluator:
    """Evaluates rate, distortion and perception for batches of kernels."""

    def __init__(self, p, table, div, x_ids, x_vals, xh_ids, xh_vals):
        self.live = p > 0
        self.p = p[self.live] / p[self.live].sum()
        self.T = table[self.live]
        self.div = div
        if div is not None and div.family == "w2":
            if x_vals is None or xh_vals is None:
                raise ValueError("W2 requires embeddings")
            self.a = np.asarray(x_vals, float)[self.live]
            self.b = np.asarray(xh_vals, float)
            self.cmax = float(((self.a[:, None] - self.b[None, :]) ** 2).max())
        elif div is not None:
            ids_live = [s for s, keep in zip(x_ids, self.live) if keep]
            ids = list(ids_live) + [s for s in xh_ids if s not in set(ids_live)]
            index = {s: i for i, s in enumerate(ids)}
            self.p_al = np.zeros(len(ids))
            for s, v in zip(ids_live, self.p):
                self.p_al[index[s]] += v
            self.Ar = np.zeros((len(ids), len(xh_ids)))
            for j, s in enumerate(xh_ids):
                self.Ar[index[s], j] = 1.0

    def __call__(self, Q):
        p = self.p
        r = np.einsum("x,bxk->bk", p, Q)
        joint = p[None, :, None] * Q
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(joint > 0, joint * np.log2(Q / r[:, None, :]), 0.0)
        rate = np.maximum(terms.sum(axis=(1, 2)), 0.0)
        dist = np.einsum("x,bxk,xk->b", p, Q, self.T)
        if self.div is None:
            return rate, dist, np.zeros_like(dist)
        fam = self.div.family
        if fam == "w2":
            return rate, dist, _batch_w2(p, self.a, r, self.b)
        r_al = r @ self.Ar.T
        if fam == "tv":
            return rate, dist, 0.5 * np.abs(r_al - self.p_al[None, :]).sum(axis=1)
        nz = self.p_al > 0
        with np.errstate(divide="ignore"):
            perc = np.sum(self.p_al[nz] * (np.log2(self.p_al[nz]) - np.log2(r_al[:, nz])), axis=1)
        return rate, dist, np.maximum(perc, 0.0)

    def slack(self, h, k):
        """Constraint slack covering the rounding of any kernel onto the grid."""
        l1 = k * h
        span = float((self.T.max(axis=1) - self.T.min(axis=1)).max())
        sd = 0.5 * l1 * span
        if self.div is None:
            return sd, 0.0
        fam = self.div.family
        if fam == "tv":
            return sd, 0.5 * l1
        if fam == "w2":
            return sd, 0.5 * l1 * self.cmax
        return sd, 2.0 * l1 * math.log2(math.e)


def _row_grid_size(k, n):
    return math.comb(n + k - 1, k - 1)


def brute_force_rdcp(source: JointSource, distortion: DistortionSpec,
                     divergence: DivergenceSpec, query: TradeoffQuery,
                     resolution: float = 1e-3, xhat_alphabet=None, xhat_values=None,
                     max_points: int = MAX_GRID_POINTS) -> BruteForceResult:
    """Minimize I(X; Xhat | Y) over all grid kernels meeting the query."""
    if xhat_alphabet is None:
        xhat_alphabet, xhat_values = source.default_xhat()
    k = len(xhat_alphabet)
    n = int(round(1.0 / resolution))
    if n < 1:
        raise ValueError("resolution must be <= 1")
    h = 1.0 / n
    pxgy = source.p_x_given_y
    div = None if is_unconstrained(query.P) else divergence
    P = math.inf if div is None else query.P
    evals = [_Evaluator(pxgy[j], distortion.table, div, source.x_alphabet, source.x_values,
                        xhat_alphabet, xhat_values) for j in range(source.ny)]
    g = _row_grid_size(k, n)
    sizes = [g ** int(e.live.sum()) for e in evals]
    total = sum(sizes) if query.mode == "per-y" else math.prod(sizes)
    if total > max_points:
        raise InstanceTooLargeError(
            f"kernel grid has {total} points (> {max_points}); coarsen the resolution")
    rows = simplex_grid(k, n)

    def enumerate_y(e):
        nl = int(e.live.sum())
        size = g ** nl
        out_r, out_d, out_p = [], [], []
        for start in range(0, size, CHUNK):
            idx = np.arange(start, min(size, start + CHUNK))
            digits = np.stack(np.unravel_index(idx, (g,) * nl), axis=1)
            Q = rows[digits]                         # (B, nl, k)
            r, d, pp = e(Q)
            out_r.append(r)
            out_d.append(d)
            out_p.append(pp)
        return np.concatenate(out_r), np.concatenate(out_d), np.concatenate(out_p), nl

    per_y = [enumerate_y(e) for e in evals]
    eps = 1e-12
    q = np.zeros((source.nx, source.ny, k))
    if query.mode == "per-y":
        upper = lower = 0.0
        for j, (e, (r, d, pp, nl)) in enumerate(zip(evals, per_y)):
            ok = (d <= query.D + eps) & (pp <= P + eps)
            if not ok.any():
                raise EmptyFeasibleGridError(
                    f"no grid kernel meets the query for y={source.y_alphabet[j]!r}",
                    y=source.y_alphabet[j])
            best = int(np.flatnonzero(ok)[np.argmin(r[ok])])
            sd, sp = e.slack(h, k)
            relaxed = (d <= query.D + sd + eps) & (pp <= P + sp + eps)
            upper += source.p_y[j] * r[best]
            lower += source.p_y[j] * r[relaxed].min()
            q[:, j, :] = _expand(e, rows, best, nl, distortion.table)
        return BruteForceResult(float(upper), float(lower), float(upper - lower),
                                ReconstructionKernel.from_rows(q, xhat_alphabet, xhat_values),
                                total)
    # y-averaged: joint product over y
    py = source.p_y
    shape = tuple(len(t[0]) for t in per_y)
    best_val, best_idx = math.inf, None
    low_val = math.inf
    slacks = [e.slack(h, k) for e in evals]
    sd = float(sum(w * s[0] for w, s in zip(py, slacks)))
    sp = float(sum(w * s[1] for w, s in zip(py, slacks)))
    for start in range(0, total, CHUNK):
        idx = np.arange(start, min(total, start + CHUNK))
        parts = np.unravel_index(idx, shape)
        R = sum(py[j] * per_y[j][0][parts[j]] for j in range(source.ny))
        Dd = sum(py[j] * per_y[j][1][parts[j]] for j in range(source.ny))
        Pp = sum(py[j] * per_y[j][2][parts[j]] for j in range(source.ny))
        ok = (Dd <= query.D + eps) & (Pp <= P + eps)
        if ok.any():
            i = int(np.flatnonzero(ok)[np.argmin(R[ok])])
            if R[i] < best_val:
                best_val, best_idx = float(R[i]), int(idx[i])
        relaxed = (Dd <= query.D + sd + eps) & (Pp <= P + sp + eps)
        if relaxed.any():
            low_val = min(low_val, float(R[relaxed].min()))
    if best_idx is None:
        raise EmptyFeasibleGridError("no grid kernel meets the y-averaged query")
    parts = np.unravel_index(best_idx, shape)
    for j, e in enumerate(evals):
        q[:, j, :] = _expand(e, rows, int(parts[j]), per_y[j][3], distortion.table)
    return BruteForceResult(best_val, low_val, best_val - low_val,
                            ReconstructionKernel.from_rows(q, xhat_alphabet, xhat_values), total)


def _expand(e, rows, flat_index, nl, table):
    g = rows.shape[0]
    digits = np.unravel_index(flat_index, (g,) * nl) if nl else ()
    n = len(e.live)
    out = np.zeros((n, rows.shape[1]))
    out[np.arange(n), table.argmin(axis=1)] = 1.0
    out[e.live] = rows[np.array(digits, dtype=int)] if nl else out[e.live]
    return out
