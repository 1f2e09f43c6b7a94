"""Exact information measures in bits.

Measures are computed by direct summation with the 0 log 0 = 0 convention.
``info_measures`` evaluates textual queries such as ``"I(X;Xhat|Y)"`` on a
joint table with named axes.
"""
from __future__ import annotations

import re
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, float)
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def entropy(p) -> float:
    """H(p) of a pmf of any shape (treated as a joint)."""
    p = np.asarray(p, float)
    return float(-_xlogx(p).sum())


def conditional_entropy(pab) -> float:
    """H(A | B) for a joint table over (A, B)."""
    pab = np.asarray(pab, float)
    return entropy(pab) - entropy(pab.sum(axis=0))


def mutual_information(pab) -> float:
    pab = np.asarray(pab, float)
    return max(0.0, entropy(pab.sum(axis=1)) + entropy(pab.sum(axis=0)) - entropy(pab))


def kernel_mutual_information(p, q) -> float:
    """I(X; Xhat) for input law ``p`` and channel rows ``q[x, xhat]``.

    Computed as sum p q log(q / r) so that tiny rates do not suffer the
    cancellation of the entropy-difference form.
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    r = p @ q
    joint = p[:, None] * q
    nz = joint > 0
    ratio = q[nz] / np.broadcast_to(r[None, :], q.shape)[nz]
    return max(0.0, float(np.sum(joint[nz] * np.log2(ratio))))


def conditional_mutual_information(pxzy) -> float:
    """I(X; Z | Y) for a joint table with axes (X, Z, Y)."""
    pxzy = np.asarray(pxzy, float)
    total = 0.0
    for j in range(pxzy.shape[2]):
        slab = pxzy[:, :, j]
        py = slab.sum()
        if py > 0:
            total += py * mutual_information(slab / py)
    return max(0.0, total)


class Distribution:
    """A joint pmf whose axes carry variable names."""

    def __init__(self, table, names: Sequence[str]):
        table = np.asarray(table, float)
        if table.ndim != len(names):
            raise ValueError("one name per axis is required")
        if len(set(names)) != len(names):
            raise ValueError("axis names must be distinct")
        if np.any(table < 0) or abs(table.sum() - 1.0) > NORM_TOL:
            raise ValueError("joint table is not a normalized pmf")
        self.table = table
        self.names = tuple(names)

    def marginal(self, keep: Sequence[str]) -> np.ndarray:
        for n in keep:
            if n not in self.names:
                raise KeyError(f"variable {n!r} not in joint {self.names}")
        drop = tuple(i for i, n in enumerate(self.names) if n not in keep)
        m = self.table.sum(axis=drop) if drop else self.table
        kept = [n for n in self.names if n in keep]
        # reorder axes to the requested order
        return np.moveaxis(m, [kept.index(n) for n in keep], range(len(keep)))

    def H(self, vars_: Sequence[str], given: Sequence[str] = ()) -> float:
        joint = list(vars_) + [g for g in given if g not in vars_]
        h = entropy(self.marginal(joint))
        return h - entropy(self.marginal(list(given))) if given else h

    def I(self, a: Sequence[str], b: Sequence[str], given: Sequence[str] = ()) -> float:
        g = list(given)
        val = (self.H(list(a), g) + self.H(list(b), g)
               - self.H(list(a) + [v for v in b if v not in a], g))
        return max(0.0, val)


_QUERY = re.compile(r"^\s*([HI])\((.*)\)\s*$")


def _names(s: str) -> list:
    return [t.strip() for t in s.split(",") if t.strip()]


def info_measures(joint: Distribution, query: str) -> float:
    """Evaluate ``H(A)``, ``H(A|B)``, ``I(A;B)`` or ``I(A;B|C)`` in bits."""
    m = _QUERY.match(query)
    if not m:
        raise ValueError(f"cannot parse query {query!r}")
    kind, body = m.groups()
    given: list = []
    if "|" in body:
        body, cond = body.split("|", 1)
        given = _names(cond)
    if kind == "H":
        if ";" in body:
            raise ValueError(f"entropy query must not contain ';': {query!r}")
        return joint.H(_names(body), given)
    parts = body.split(";")
    if len(parts) != 2:
        raise ValueError(f"mutual-information query needs exactly one ';': {query!r}")
    return joint.I(_names(parts[0]), _names(parts[1]), given)
