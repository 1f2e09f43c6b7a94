"""Rate-distortion(-conditional-perception) solvers on finite alphabets.

``solve_rd`` runs Blahut-Arimoto with a bisection over the Lagrange slope.
Finite perception bounds are solved as exponential-cone programs (cvxpy with
Clarabel); for TV, and for P = 0 with any family, a conditional-gradient
method with an exact LP subproblem is available as ``method="frank-wolfe"``.
"""
from __future__ import annotations

import csv
import io
import math
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .core import (DistortionSpec, DivergenceSpec, JointSource, ReconstructionKernel,
                   induced_laws)
from .divergence import AbsoluteContinuityError, conditional_divergence, law_divergence, marginal_divergence
from .measures import kernel_mutual_information

LN2 = math.log(2.0)


class _Unconstrained:
    """Tag for an inactive perception bound."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNCONSTRAINED"

    def __str__(self):
        return "inf"

    def __reduce__(self):
        return (_Unconstrained, ())


UNCONSTRAINED = _Unconstrained()


def is_unconstrained(P) -> bool:
    return P is UNCONSTRAINED


def as_bound(P):
    """Normalize user input for P: None/inf/'inf' become the UNCONSTRAINED tag."""
    if P is None or P is UNCONSTRAINED:
        return UNCONSTRAINED
    if isinstance(P, str):
        if P.strip().lower() in ("inf", "infinity", "unconstrained"):
            return UNCONSTRAINED
        P = float(P)
    P = float(P)
    if math.isinf(P) and P > 0:
        return UNCONSTRAINED
    if not P >= 0:
        raise ValueError(f"perception bound must be >= 0, got {P}")
    return P


class InfeasibleError(ValueError):
    def __init__(self, msg, y=None):
        super().__init__(msg)
        self.y = y


class NonConvergenceError(RuntimeError):
    pass


MODES = ("per-y", "y-averaged")
FEAS_TOL = 1e-7      # conic probes are accurate to about 1e-8


@dataclass(frozen=True)
class TradeoffQuery:
    D: float
    P: object = UNCONSTRAINED
    mode: str = "per-y"
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)

    def __post_init__(self):
        if not self.D >= 0:
            raise ValueError(f"D must be >= 0, got {self.D}")
        object.__setattr__(self, "D", float(self.D))
        object.__setattr__(self, "P", as_bound(self.P))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-4                 # bits
    max_iter: int = 100_000
    method: str = "conic"             # or "frank-wolfe"
    fw_step: str = "2/(k+2)"          # or "line-search"
    ba_gap: float = 1e-10
    ba_max_iter: int = 3_000          # per slope; slower cases fall back to the conic program
    bisection_steps: int = 200
    conic_solver: str = "CLARABEL"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.method not in ("conic", "frank-wolfe"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.fw_step not in ("2/(k+2)", "line-search"):
            raise ValueError(f"unknown step rule {self.fw_step!r}")


@dataclass(frozen=True, eq=False)
class TradeoffPoint:
    rate: float
    distortion: float
    perception: float
    kernel: ReconstructionKernel
    per_y_rate: np.ndarray
    per_y_distortion: np.ndarray
    per_y_perception: np.ndarray
    iterations: int = 0
    query: Optional[TradeoffQuery] = None


@dataclass(frozen=True)
class _Result:
    q: np.ndarray
    rate: float
    distortion: float
    iterations: int


# -- Blahut-Arimoto ----------------------------------------------------------

class _SlowConvergence(Exception):
    pass


def _ba(p, A, r, gap_tol, max_iter):
    """Alternating minimization at a fixed slope; ``A`` = exp(-s * table).

    Raises _SlowConvergence when the duality gap is still above ``gap_tol``
    after ``max_iter`` sweeps.
    """
    it = 0
    for it in range(1, max_iter + 1):
        z = A @ r
        c = (p / z) @ A
        pos = r > 0
        lc = np.log2(np.maximum(c, 1e-300))
        gap = lc.max() - float(r[pos] @ lc[pos])
        r = r * c
        r /= r.sum()
        if gap < gap_tol:
            break
    else:
        raise _SlowConvergence(gap)
    q = A * r[None, :]
    q /= q.sum(axis=1, keepdims=True)
    return q, r, it


def _rd_single(p, table, D, config: SolverConfig) -> _Result:
    """R(D) for a single input law ``p`` against ``table``.

    Blahut-Arimoto with slope bisection; if any slope converges too slowly
    the exponential-cone program is solved instead.
    """
    try:
        return _rd_ba(p, table, D, config)
    except _SlowConvergence:
        return _rd_conic(p, table, D, config)


def _rd_conic(p, table, D, config: SolverConfig) -> _Result:
    p = np.asarray(p, float)
    n, k = table.shape
    live = p > 0
    pl = p[live] / p[live].sum()
    tl = table[live]
    prob = _get_problem("rate", len(pl), k, None, False, 0)
    pr = prob.params
    pr["p"].value = pl
    pr["pcol"].value = pl[:, None]
    pr["T"].value = tl
    pr["D"].value = max(float(D), float(pl @ tl.min(axis=1)) + 1e-12)
    try:
        prob.prob.solve(solver=config.conic_solver)
    except cp.error.SolverError as exc:
        raise NonConvergenceError(str(exc)) from exc
    if prob.prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NonConvergenceError(f"conic solver status {prob.prob.status}")
    J = np.clip(prob.J.value, 0.0, None)
    ql = J / np.maximum(J.sum(axis=1, keepdims=True), 1e-300)
    ql /= ql.sum(axis=1, keepdims=True)
    q = np.zeros((n, k))
    q[np.arange(n), table.argmin(axis=1)] = 1.0
    q[live] = ql
    return _Result(q, kernel_mutual_information(pl, ql), float(pl @ (ql * tl).sum(1)),
                   prob.prob.solver_stats.num_iters or 0)


def _rd_ba(p, table, D, config: SolverConfig) -> _Result:
    p = np.asarray(p, float)
    n, k = table.shape
    live = p > 0
    pl = p[live] / p[live].sum()
    tl = table[live]
    rowmin = tl.min(axis=1)
    d_min = float(pl @ rowmin)
    col = pl @ tl
    d_max = float(col.min())
    q = np.zeros((n, k))
    q[np.arange(n), table.argmin(axis=1)] = 1.0   # rows of null x
    if D < d_min - 1e-12:
        raise InfeasibleError(f"D={D:.6g} below minimum achievable distortion {d_min:.6g}")
    if D >= d_max:
        q[live] = 0.0
        q[live, int(np.argmin(col))] = 1.0
        return _Result(q, 0.0, d_max, 0)
    iters = 0
    if D <= d_min + 1e-12:
        mask = np.isclose(tl, rowmin[:, None], rtol=0, atol=1e-15).astype(float)
        ql, _, iters = _ba(pl, mask, np.full(k, 1.0 / k), config.ba_gap, config.ba_max_iter)
        q[live] = ql
        return _Result(q, kernel_mutual_information(pl, ql), float(pl @ (ql * tl).sum(1)), iters)

    shifted = tl - rowmin[:, None]

    def at(s, r0):
        nonlocal iters
        qq, rr, it = _ba(pl, np.exp(-s * shifted), r0, config.ba_gap, config.ba_max_iter)
        iters += it
        return qq, rr, float(pl @ (qq * tl).sum(1))

    r = pl @ np.full((len(pl), k), 1.0 / k)
    s_hi = 1.0
    q_hi, r_hi, d_hi = at(s_hi, r)
    s_lo, q_lo, d_lo = 0.0, None, d_max
    while d_hi > D:
        s_lo, q_lo, d_lo = s_hi, q_hi, d_hi
        s_hi *= 2.0
        q_hi, r_hi, d_hi = at(s_hi, r_hi)
        if s_hi > 1e12:
            break
    for _ in range(config.bisection_steps):
        if D - d_hi <= 1e-12 * max(1.0, D) or s_hi - s_lo <= 1e-13 * s_hi:
            break
        s_mid = 0.5 * (s_lo + s_hi) if s_lo > 0 else 0.5 * s_hi
        q_mid, r_mid, d_mid = at(s_mid, r_hi)
        if d_mid > D:
            s_lo, q_lo, d_lo = s_mid, q_mid, d_mid
        else:
            s_hi, q_hi, r_hi, d_hi = s_mid, q_mid, r_mid, d_mid
    qf = q_hi
    if D - d_hi > 1e-12 * max(1.0, D) and q_lo is not None and d_lo > d_hi:
        # linear segment of R(D): time-share the two slope solutions
        lam = (D - d_hi) / (d_lo - d_hi)
        qf = lam * q_lo + (1.0 - lam) * q_hi
    q[live] = qf
    return _Result(q, kernel_mutual_information(pl, qf), float(pl @ (qf * tl).sum(1)), iters)


# -- conic programs ------------------------------------------------------------

_local = threading.local()


def _cache():
    if not hasattr(_local, "problems"):
        _local.problems = {}
    return _local.problems


def _alignment(x_ids, xh_ids):
    ids = list(x_ids) + [s for s in xh_ids if s not in set(x_ids)]
    index = {s: i for i, s in enumerate(ids)}
    ap = np.zeros((len(ids), len(x_ids)))
    ar = np.zeros((len(ids), len(xh_ids)))
    for i, s in enumerate(x_ids):
        ap[index[s], i] = 1.0
    for j, s in enumerate(xh_ids):
        ar[index[s], j] = 1.0
    return ap, ar


@dataclass
class _Problem:
    prob: cp.Problem
    J: cp.Variable
    params: dict


def _perception_constraints(family, r, P_is_zero, n_al, shape_w2):
    """Build perception constraints on output law ``r``; returns (cons, params)."""
    params = {}
    cons = []
    if family == "w2":
        n, k = shape_w2
        pi = cp.Variable((n, k), nonneg=True)
        params["p_w2"] = cp.Parameter(n, nonneg=True)
        params["C"] = cp.Parameter((n, k), nonneg=True)
        params["P"] = cp.Parameter(nonneg=True)
        cons += [cp.sum(pi, axis=1) == params["p_w2"], cp.sum(pi, axis=0) == r,
                 cp.sum(cp.multiply(params["C"], pi)) <= params["P"]]
        return cons, params
    params["p_al"] = cp.Parameter(n_al, nonneg=True)
    params["Ar"] = cp.Parameter((n_al, r.shape[0]))
    r_al = params["Ar"] @ r
    if P_is_zero:
        cons.append(r_al == params["p_al"])
    elif family == "tv":
        params["P"] = cp.Parameter(nonneg=True)
        t = cp.Variable(n_al, nonneg=True)
        cons += [r_al - params["p_al"] <= t, params["p_al"] - r_al <= t,
                 0.5 * cp.sum(t) <= params["P"]]
    else:
        params["P"] = cp.Parameter(nonneg=True)
        cons.append(cp.sum(cp.rel_entr(params["p_al"], r_al)) / LN2 <= params["P"])
    return cons, params


def _build(kind, n, k, family, P_is_zero, n_al):
    """``kind`` is 'rate' (minimize I) or 'probe' (minimize distortion)."""
    J = cp.Variable((n, k), nonneg=True)
    p = cp.Parameter(n, nonneg=True)
    pcol = cp.Parameter((n, 1), nonneg=True)
    T = cp.Parameter((n, k), nonneg=True)
    r = cp.sum(J, axis=0)
    cons = [cp.sum(J, axis=1) == p]
    params = {"p": p, "pcol": pcol, "T": T}
    dist = cp.sum(cp.multiply(T, J))
    if kind == "rate":
        Dp = cp.Parameter(nonneg=True)
        params["D"] = Dp
        cons.append(dist <= Dp)
    if family is not None:
        pc, pp = _perception_constraints(family, r, P_is_zero, n_al, (n, k))
        cons += pc
        params.update(pp)
    if kind == "rate":
        outer = pcol @ cp.reshape(r, (1, k), order="C")
        obj = cp.Minimize(cp.sum(cp.rel_entr(J, outer)) / LN2)
    else:
        obj = cp.Minimize(dist)
    return _Problem(cp.Problem(obj, cons), J, params)


def _get_problem(kind, n, k, family, P_is_zero, n_al):
    key = (kind, n, k, family, P_is_zero, n_al)
    cache = _cache()
    if key not in cache:
        cache[key] = _compiled(_build(*key))
    return cache[key]


def _compiled(problem: _Problem) -> _Problem:
    # One throwaway solve so every real solve reuses the cached program; the
    # first solve of a fresh problem lands on slightly different digits.
    for par in problem.prob.parameters():
        par.value = np.ones(par.shape) if par.shape else 1.0
    try:
        problem.prob.solve(solver=SolverConfig().conic_solver)
    except cp.SolverError:
        pass
    return problem


class _Single:
    """One conditional subproblem: input law p with distortion table T."""

    def __init__(self, p, table, div: DivergenceSpec, x_ids, x_vals, xh_ids, xh_vals):
        p = np.asarray(p, float)
        self.full_n = len(p)
        self.live = p > 0
        self.p = p[self.live] / p[self.live].sum()
        self.table_full = np.asarray(table, float)
        self.T = self.table_full[self.live]
        self.div = div
        self.x_ids = tuple(np.asarray(x_ids, dtype=object)[self.live]) if x_ids is not None else None
        self.x_ids_full = tuple(x_ids) if x_ids is not None else None
        self.x_vals = x_vals
        self.xh_ids = tuple(xh_ids)
        self.xh_vals = xh_vals
        self.k = self.T.shape[1]
        if div.family == "w2":
            if x_vals is None or xh_vals is None:
                raise ValueError("W2 perception needs embeddings on X and Xhat")
            a = np.asarray(x_vals, float)[self.live].reshape(len(self.p), -1)
            b = np.asarray(xh_vals, float).reshape(self.k, -1)
            self.C = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
            self.n_al = 0
        else:
            ap, ar = _alignment(self.x_ids, self.xh_ids)
            self.p_al = ap @ self.p
            self.Ar = ar
            self.n_al = ap.shape[0]

    def fill(self, prob: _Problem, D=None, P=None):
        pr = prob.params
        pr["p"].value = self.p
        pr["pcol"].value = self.p[:, None]
        pr["T"].value = self.T
        if D is not None and "D" in pr:
            pr["D"].value = D
        if "P" in pr:
            pr["P"].value = P
        if self.div.family == "w2":
            pr["p_w2"].value = self.p
            pr["C"].value = self.C
        else:
            pr["p_al"].value = self.p_al
            pr["Ar"].value = self.Ar

    def expand(self, q_live):
        q = np.zeros((self.full_n, self.k))
        q[np.arange(self.full_n), self.table_full.argmin(axis=1)] = 1.0
        q[self.live] = q_live
        return q

    def perception(self, q_live) -> float:
        r = self.p @ q_live
        x_ids = self.x_ids if self.x_ids is not None else tuple(range(len(self.p)))
        xv = None if self.x_vals is None else np.asarray(self.x_vals, float)[self.live]
        return law_divergence(self.div, self.p, r, x_ids, self.xh_ids, xv, self.xh_vals)

    def _solve(self, prob, config):
        try:
            prob.prob.solve(solver=config.conic_solver)
        except cp.error.SolverError as exc:
            raise NonConvergenceError(str(exc)) from exc
        status = prob.prob.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return None, 0
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise NonConvergenceError(f"conic solver status {status}")
        iters = prob.prob.solver_stats.num_iters or 0
        J = np.clip(prob.J.value, 0.0, None)
        q = J / np.maximum(J.sum(axis=1, keepdims=True), 1e-300)
        bad = J.sum(axis=1) <= 0
        q[bad] = 1.0 / self.k
        return q / q.sum(axis=1, keepdims=True), iters

    def min_distortion(self, P, config) -> float:
        """Feasibility probe: least distortion meeting the perception bound."""
        if is_unconstrained(P):
            return float(self.p @ self.T.min(axis=1))
        zero = P == 0 and self.div.family != "w2"
        prob = _get_problem("probe", len(self.p), self.k, self.div.family, zero, self.n_al)
        self.fill(prob, P=P)
        q, _ = self._solve(prob, config)
        if q is None:
            return math.inf
        return float(self.p @ (q * self.T).sum(1))

    def solve(self, D, P, config: SolverConfig) -> _Result:
        if is_unconstrained(P):
            res = _rd_single(self.p, self.T, D, config)
            return _Result(self.expand(res.q), res.rate, res.distortion, res.iterations)
        d_probe = self.min_distortion(P, config)
        if not math.isfinite(d_probe):
            raise InfeasibleError(f"perception bound P={P} cannot be met")
        if D < d_probe - FEAS_TOL:
            raise InfeasibleError(
                f"D={D:.6g} below least distortion {d_probe:.6g} compatible with P={P}")
        D_eff = max(D, d_probe + 1e-12)
        if config.method == "frank-wolfe":
            q, iters = self._frank_wolfe(D_eff, P, config)
        else:
            zero = P == 0 and self.div.family != "w2"
            prob = _get_problem("rate", len(self.p), self.k, self.div.family, zero, self.n_al)
            self.fill(prob, D=D_eff, P=P)
            q, iters = self._solve(prob, config)
            if q is None:
                raise InfeasibleError(f"no kernel meets D={D:.6g}, P={P}")
        rate = kernel_mutual_information(self.p, q)
        dist = float(self.p @ (q * self.T).sum(1))
        return _Result(self.expand(q), rate, dist, iters)

    # -- conditional gradient ------------------------------------------------

    def _fw_lp(self, grad, D, P):
        """argmin <grad, S> over stochastic S with distortion/TV constraints."""
        n, k = grad.shape
        nv = n * k
        fam = self.div.family
        use_tv = not (P == 0) and fam == "tv"
        if not (P == 0) and fam != "tv":
            raise ValueError("frank-wolfe supports TV, or P = 0 with any family")
        n_al = self.n_al if fam != "w2" else 0
        n_t = n_al if use_tv else 0
        c = np.concatenate([grad.ravel(), np.zeros(n_t)])
        a_eq, b_eq, a_ub, b_ub = [], [], [], []
        for i in range(n):
            row = np.zeros(nv + n_t)
            row[i * k:(i + 1) * k] = 1.0
            a_eq.append(row)
            b_eq.append(1.0)
        dist = np.concatenate([(self.p[:, None] * self.T).ravel(), np.zeros(n_t)])
        a_ub.append(dist)
        b_ub.append(D)
        # r = sum_x p(x) S(x, .) ; r_al = Ar r
        R = np.zeros((k, nv))
        for i in range(n):
            for j in range(k):
                R[j, i * k + j] = self.p[i]
        if fam == "w2":
            # P == 0: output law must equal the source law on the line
            M = np.zeros((len(self.p), k))
            for i in range(len(self.p)):
                M[i] = self.C[i] == 0
            for i in range(len(self.p)):
                a_eq.append(np.concatenate([M[i] @ R, np.zeros(n_t)]))
                b_eq.append(self.p[i])
        else:
            R_al = self.Ar @ R
            if use_tv:
                for a in range(n_al):
                    e = np.zeros(n_t)
                    e[a] = -1.0
                    a_ub.append(np.concatenate([R_al[a], e]))
                    b_ub.append(self.p_al[a])
                    a_ub.append(np.concatenate([-R_al[a], e]))
                    b_ub.append(-self.p_al[a])
                a_ub.append(np.concatenate([np.zeros(nv), 0.5 * np.ones(n_t)]))
                b_ub.append(P)
            else:
                for a in range(n_al):
                    a_eq.append(np.concatenate([R_al[a], np.zeros(n_t)]))
                    b_eq.append(self.p_al[a])
        res = linprog(c, A_ub=np.array(a_ub), b_ub=np.array(b_ub), A_eq=np.array(a_eq),
                      b_eq=np.array(b_eq), bounds=(0, None), method="highs")
        if res.status != 0:
            raise InfeasibleError(f"linear subproblem infeasible: {res.message}")
        S = res.x[:nv].reshape(n, k)
        S = np.clip(S, 0.0, None)
        return S / S.sum(axis=1, keepdims=True)

    def _frank_wolfe(self, D, P, config: SolverConfig):
        n, k = self.T.shape
        # least-distortion vertex is feasible whenever the probe passed
        q = self._fw_lp(self.p[:, None] * self.T, D, P)

        def f(qq):
            return kernel_mutual_information(self.p, qq)

        for it in range(1, config.max_iter + 1):
            r = self.p @ q
            with np.errstate(divide="ignore"):
                ratio = np.maximum(q, 1e-16) / np.maximum(r[None, :], 1e-16)
            grad = self.p[:, None] * np.log2(ratio)
            S = self._fw_lp(grad, D, P)
            gap = float(np.sum(grad * (q - S)))
            if gap <= config.tol * 0.1:
                return q, it
            if config.fw_step == "2/(k+2)":
                gamma = 2.0 / (it + 2.0)
            else:
                gamma = minimize_scalar(lambda g: f(q + g * (S - q)), bounds=(0.0, 1.0),
                                        method="bounded", options={"xatol": 1e-10}).x
            q = q + gamma * (S - q)
        raise NonConvergenceError(
            f"frank-wolfe did not reach gap {config.tol * 0.1:g} in {config.max_iter} iterations")


def _xhat_for(source: JointSource, xhat_alphabet=None, xhat_values=None, distortion=None):
    if xhat_alphabet is None:
        ids, vals = source.default_xhat()
    else:
        ids, vals = tuple(xhat_alphabet), xhat_values
    if distortion is not None and distortion.table.shape != (source.nx, len(ids)):
        raise ValueError(f"distortion table shape {distortion.table.shape} does not match "
                         f"(|X|, |Xhat|) = ({source.nx}, {len(ids)})")
    return ids, vals


def _point(source, kernel, distortion, div, per_y_rate, iters, query, conditional=True):
    laws = induced_laws(source, kernel, distortion)
    try:
        if div is None:
            perc, per_y_perc = 0.0, np.zeros(source.ny)
        elif conditional:
            perc, per_y_perc = conditional_divergence(div, source, kernel)
        else:
            perc = marginal_divergence(div, source, kernel)
            per_y_perc = np.full(source.ny, perc)
    except AbsoluteContinuityError:
        # unconstrained points may leave source symbols unreachable
        perc, per_y_perc = math.inf, np.full(source.ny, math.inf)
    rate = float(source.p_y @ per_y_rate)
    return TradeoffPoint(rate, float(laws.distortion), float(perc), kernel,
                         np.asarray(per_y_rate, float), laws.distortion_per_y,
                         per_y_perc, int(iters), query)


def solve_rd(source: JointSource, distortion: DistortionSpec, D: float,
             config: SolverConfig = SolverConfig(), xhat_alphabet=None,
             xhat_values=None) -> TradeoffPoint:
    """R(D) of the X-marginal; the returned kernel ignores y."""
    xh_ids, xh_vals = _xhat_for(source, xhat_alphabet, xhat_values, distortion)
    if D < 0:
        raise InfeasibleError("D must be >= 0")
    res = _rd_single(source.p_x, distortion.table, D, config)
    kernel = ReconstructionKernel.memoryless(source, res.q, xh_ids, xh_vals)
    q = TradeoffQuery(D, UNCONSTRAINED)
    point = _point(source, kernel, distortion, None, np.full(source.ny, res.rate),
                   res.iterations, q)
    return point


def solve_rdp(source: JointSource, distortion: DistortionSpec, divergence: DivergenceSpec,
              D: float, P=UNCONSTRAINED, config: SolverConfig = SolverConfig(),
              xhat_alphabet=None, xhat_values=None) -> TradeoffPoint:
    """R(D, P) of the X-marginal with the perception bound d(p_X, p_Xhat) <= P."""
    P = as_bound(P)
    xh_ids, xh_vals = _xhat_for(source, xhat_alphabet, xhat_values, distortion)
    sub = _Single(source.p_x, distortion.table, divergence, source.x_alphabet,
                  source.x_values, xh_ids, xh_vals)
    res = sub.solve(D, P, config)
    kernel = ReconstructionKernel.memoryless(source, res.q, xh_ids, xh_vals)
    query = TradeoffQuery(D, P, "per-y", divergence)
    return _point(source, kernel, distortion, divergence, np.full(source.ny, res.rate),
                  res.iterations, query, conditional=False)


def solve_rdcp(source: JointSource, distortion: DistortionSpec, query: TradeoffQuery,
               config: SolverConfig = SolverConfig(), xhat_alphabet=None,
               xhat_values=None) -> TradeoffPoint:
    """Minimize I(X; Xhat | Y) under conditional distortion/perception bounds."""
    xh_ids, xh_vals = _xhat_for(source, xhat_alphabet, xhat_values, distortion)
    div = query.divergence
    if query.mode == "y-averaged":
        return _solve_y_averaged(source, distortion, query, config, xh_ids, xh_vals)
    pxgy = source.p_x_given_y
    q = np.zeros((source.nx, source.ny, len(xh_ids)))
    rates = np.zeros(source.ny)
    iters = 0
    for j in range(source.ny):
        sub = _Single(pxgy[j], distortion.table, div, source.x_alphabet, source.x_values,
                      xh_ids, xh_vals)
        try:
            res = sub.solve(query.D, query.P, config)
        except InfeasibleError as exc:
            raise InfeasibleError(f"y={source.y_alphabet[j]!r}: {exc}", y=source.y_alphabet[j]) from exc
        q[:, j, :] = res.q
        rates[j] = res.rate
        iters += res.iterations
    kernel = ReconstructionKernel.from_rows(q, xh_ids, xh_vals)
    return _point(source, kernel, distortion, div, rates, iters, query)


def _solve_y_averaged(source, distortion, query, config, xh_ids, xh_vals):
    div = query.divergence
    P = query.P
    py = source.p_y
    pxgy = source.p_x_given_y
    subs = [_Single(pxgy[j], distortion.table, div, source.x_alphabet, source.x_values,
                    xh_ids, xh_vals) for j in range(source.ny)]
    Js, cons, rate_terms, dist_terms, perc_terms = [], [], [], [], []
    for j, s in enumerate(subs):
        n, k = s.T.shape
        J = cp.Variable((n, k), nonneg=True)
        r = cp.sum(J, axis=0)
        cons.append(cp.sum(J, axis=1) == s.p)
        outer = s.p[:, None] @ cp.reshape(r, (1, k), order="C")
        rate_terms.append(py[j] * cp.sum(cp.rel_entr(J, outer)) / LN2)
        dist_terms.append(py[j] * cp.sum(cp.multiply(s.T, J)))
        if not is_unconstrained(P):
            if div.family == "w2":
                pi = cp.Variable((n, k), nonneg=True)
                cons += [cp.sum(pi, axis=1) == s.p, cp.sum(pi, axis=0) == r]
                perc_terms.append(py[j] * cp.sum(cp.multiply(s.C, pi)))
            elif div.family == "tv":
                t = cp.Variable(s.n_al, nonneg=True)
                r_al = s.Ar @ r
                cons += [r_al - s.p_al <= t, s.p_al - r_al <= t]
                perc_terms.append(py[j] * 0.5 * cp.sum(t))
            else:
                perc_terms.append(py[j] * cp.sum(cp.rel_entr(s.p_al, s.Ar @ r)) / LN2)
        Js.append(J)
    cons.append(sum(dist_terms) <= query.D + 1e-12)
    if perc_terms:
        cons.append(sum(perc_terms) <= P)
    prob = cp.Problem(cp.Minimize(sum(rate_terms)), cons)
    try:
        prob.solve(solver=config.conic_solver)
    except cp.error.SolverError as exc:
        raise NonConvergenceError(str(exc)) from exc
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise InfeasibleError(f"no kernel meets D={query.D:.6g}, P={P} (y-averaged)")
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NonConvergenceError(f"conic solver status {prob.status}")
    q = np.zeros((source.nx, source.ny, len(xh_ids)))
    rates = np.zeros(source.ny)
    for j, (s, J) in enumerate(zip(subs, Js)):
        Jv = np.clip(J.value, 0.0, None)
        ql = Jv / np.maximum(Jv.sum(axis=1, keepdims=True), 1e-300)
        ql /= ql.sum(axis=1, keepdims=True)
        q[:, j, :] = s.expand(ql)
        rates[j] = kernel_mutual_information(s.p, ql)
    kernel = ReconstructionKernel.from_rows(q, xh_ids, xh_vals)
    iters = prob.solver_stats.num_iters or 0
    return _point(source, kernel, distortion, div, rates, iters, query)


# -- curves ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CurveCell:
    D: float
    P: object
    point: Optional[TradeoffPoint]
    error: Optional[str] = None

    @property
    def feasible(self) -> bool:
        return self.point is not None


@dataclass(frozen=True, eq=False)
class TradeoffCurve:
    D_grid: tuple
    P_grid: tuple
    cells: tuple           # cells[i][j] for D_grid[i], P_grid[j]
    diagnostics: tuple

    def rates(self) -> np.ndarray:
        out = np.full((len(self.D_grid), len(self.P_grid)), np.nan)
        for i, row in enumerate(self.cells):
            for j, c in enumerate(row):
                if c.feasible:
                    out[i, j] = c.point.rate
        return out

    def to_csv(self, header: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["D", "P", "rate_bits", "realized_D", "realized_P", "feasible", "iterations"])
        for row in self.cells:
            for c in row:
                if c.feasible:
                    pt = c.point
                    w.writerow([_fmt(c.D), _fmt(c.P), _fmt(pt.rate), _fmt(pt.distortion),
                                _fmt(pt.perception), "true", pt.iterations])
                else:
                    w.writerow([_fmt(c.D), _fmt(c.P), "", "", "", "false", 0])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is UNCONSTRAINED:
        return "inf"
    return f"{float(v):.10g}"


def _solve_cell(args):
    source, distortion, div, D, P, mode, config = args
    try:
        pt = solve_rdcp(source, distortion, TradeoffQuery(D, P, mode, div), config)
        return CurveCell(D, P, pt)
    except InfeasibleError as exc:
        return CurveCell(D, P, None, str(exc))


def _p_key(P) -> float:
    return math.inf if P is UNCONSTRAINED else float(P)


def trace_curve(source: JointSource, distortion: DistortionSpec, divergence: DivergenceSpec,
                D_grid: Sequence[float], P_grid: Sequence = (UNCONSTRAINED,),
                config: SolverConfig = SolverConfig(), mode: str = "per-y",
                jobs: int = 1) -> TradeoffCurve:
    """Solve every (D, P) cell; infeasible cells are marked, not fatal."""
    D_grid = tuple(float(d) for d in D_grid)
    P_grid = tuple(as_bound(p) for p in P_grid)
    if not D_grid or not P_grid:
        raise ValueError("grids must be non-empty")
    if list(D_grid) != sorted(D_grid):
        raise ValueError("D grid must be sorted ascending")
    if [_p_key(p) for p in P_grid] != sorted(_p_key(p) for p in P_grid):
        raise ValueError("P grid must be sorted ascending")
    tasks = [(source, distortion, divergence, D, P, mode, config)
             for D in D_grid for P in P_grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            flat = list(ex.map(_solve_cell, tasks))
    else:
        flat = [_solve_cell(t) for t in tasks]
    nP = len(P_grid)
    cells = tuple(tuple(flat[i * nP:(i + 1) * nP]) for i in range(len(D_grid)))
    return TradeoffCurve(D_grid, P_grid, cells,
                         tuple(monotonicity_diagnostics(cells, D_grid, P_grid, config.tol)))


def monotonicity_diagnostics(cells, D_grid, P_grid, tol) -> list:
    """Report rate increases beyond ``tol`` along either grid axis."""
    out = []
    for i in range(len(D_grid)):
        for j in range(len(P_grid)):
            c = cells[i][j]
            if not c.feasible:
                continue
            if i + 1 < len(D_grid) and cells[i + 1][j].feasible:
                inc = cells[i + 1][j].point.rate - c.point.rate
                if inc > tol:
                    out.append(f"rate increases by {inc:.3g} from D={D_grid[i]:g} to "
                               f"D={D_grid[i + 1]:g} at P={P_grid[j]}")
            if j + 1 < len(P_grid) and cells[i][j + 1].feasible:
                inc = cells[i][j + 1].point.rate - c.point.rate
                if inc > tol:
                    out.append(f"rate increases by {inc:.3g} from P={P_grid[j]} to "
                               f"P={P_grid[j + 1]} at D={D_grid[i]:g}")
    return out
