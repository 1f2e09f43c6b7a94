"""Finite sources, reconstruction kernels and distortion tables.

Every object here is immutable after construction; arrays are copied and
flagged read-only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PMF_TOL = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class SourceSpecError(ValueError):
    """Raised for malformed source-spec files; message carries the field."""


@dataclass(frozen=True, eq=False)
class JointSource:
    """Joint law p(x, y) on finite alphabets.

    ``pmf[i, j]`` is p(x_alphabet[i], y_alphabet[j]). ``x_values`` embeds the
    x-symbols on the real line for MSE and W2; ``xhat_values`` optionally
    widens the reconstruction alphabet. ``exact`` holds the same table as
    Fractions when the source was built from rationals.
    """

    x_alphabet: tuple
    y_alphabet: tuple
    pmf: np.ndarray
    x_values: Optional[np.ndarray] = None
    xhat_values: Optional[np.ndarray] = None
    exact: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.ndim == 1:
            pmf = pmf[:, None]
        if pmf.shape != (len(self.x_alphabet), len(self.y_alphabet)):
            raise ValueError(
                f"pmf shape {pmf.shape} does not match alphabets "
                f"({len(self.x_alphabet)}, {len(self.y_alphabet)})")
        if len(set(self.x_alphabet)) != len(self.x_alphabet):
            raise ValueError("duplicate x symbols")
        if len(set(self.y_alphabet)) != len(self.y_alphabet):
            raise ValueError("duplicate y symbols")
        if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
            raise ValueError("pmf entries must be finite and non-negative")
        if abs(pmf.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf sums to {pmf.sum():.15g}, not 1")
        py = pmf.sum(axis=0)
        if np.any(py <= 0):
            bad = [self.y_alphabet[j] for j in np.flatnonzero(py <= 0)]
            raise ValueError(f"y symbols with zero probability: {bad}")
        object.__setattr__(self, "x_alphabet", tuple(self.x_alphabet))
        object.__setattr__(self, "y_alphabet", tuple(self.y_alphabet))
        object.__setattr__(self, "pmf", _frozen(pmf))
        for name in ("x_values", "xhat_values"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, _frozen(v))
        if self.x_values is not None and len(self.x_values) != len(self.x_alphabet):
            raise ValueError("x_values length must match x_alphabet")

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_marginal(cls, px, x_values=None, x_alphabet=None, **kw) -> "JointSource":
        """Source with a trivial (single-symbol) side information."""
        px = list(px)
        if x_alphabet is None:
            x_alphabet = tuple(range(len(px)))
        if all(isinstance(p, Fraction) for p in px):
            return cls.from_rational([[p] for p in px], x_alphabet, ("*",), x_values, **kw)
        return cls(x_alphabet, ("*",), np.asarray(px, float)[:, None], x_values, **kw)

    @classmethod
    def from_rational(cls, table, x_alphabet=None, y_alphabet=None,
                      x_values=None, xhat_values=None) -> "JointSource":
        rows = tuple(tuple(Fraction(v) for v in row) for row in table)
        total = sum(sum(r) for r in rows)
        if total != 1:
            raise ValueError(f"rational pmf sums to {total}, not 1")
        if any(v < 0 for r in rows for v in r):
            raise ValueError("pmf entries must be non-negative")
        if x_alphabet is None:
            x_alphabet = tuple(range(len(rows)))
        if y_alphabet is None:
            y_alphabet = tuple(range(len(rows[0])))
        pmf = np.array([[float(v) for v in r] for r in rows])
        pmf = pmf / pmf.sum()
        return cls(x_alphabet, y_alphabet, pmf, x_values, xhat_values, exact=rows)

    @classmethod
    def bernoulli(cls, p: float) -> "JointSource":
        return cls.from_marginal([1.0 - p, p], x_values=[0.0, 1.0])

    # -- derived laws -------------------------------------------------------

    @property
    def nx(self) -> int:
        return len(self.x_alphabet)

    @property
    def ny(self) -> int:
        return len(self.y_alphabet)

    @property
    def p_x(self) -> np.ndarray:
        return self.pmf.sum(axis=1)

    @property
    def p_y(self) -> np.ndarray:
        return self.pmf.sum(axis=0)

    @property
    def p_x_given_y(self) -> np.ndarray:
        """Array of shape (|Y|, |X|); row j is p(. | y_j)."""
        return (self.pmf / self.p_y).T

    def exact_p_x_given_y(self) -> list:
        if self.exact is None:
            raise ValueError("source has no exact-rational table")
        cols = []
        for j in range(self.ny):
            py = sum(self.exact[i][j] for i in range(self.nx))
            cols.append([self.exact[i][j] / py for i in range(self.nx)])
        return cols

    def exact_p_x(self) -> list:
        if self.exact is None:
            raise ValueError("source has no exact-rational table")
        return [sum(r) for r in self.exact]

    def exact_p_y(self) -> list:
        if self.exact is None:
            raise ValueError("source has no exact-rational table")
        return [sum(self.exact[i][j] for i in range(self.nx)) for j in range(self.ny)]

    def default_xhat(self) -> tuple:
        """Reconstruction alphabet ids and embedding used when none is given."""
        if self.xhat_values is None:
            return self.x_alphabet, self.x_values
        ids = []
        lookup = {}
        if self.x_values is not None:
            lookup = {float(v): s for v, s in zip(self.x_values, self.x_alphabet)}
        for i, v in enumerate(self.xhat_values):
            ids.append(lookup.get(float(v), f"xhat{i}"))
        return tuple(ids), self.xhat_values

    def is_y_deterministic(self) -> bool:
        """True when p(y | x) is 0 or 1 for every x of positive probability."""
        support = self.pmf > 0
        return bool(np.all(support.sum(axis=1) <= 1))


@dataclass(frozen=True, eq=False)
class ReconstructionKernel:
    """Conditional law q(xhat | x, y) stored as an array (|X|, |Y|, |Xhat|)."""

    q: np.ndarray
    xhat_alphabet: tuple
    xhat_values: Optional[np.ndarray] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 3:
            raise ValueError("kernel must have shape (|X|, |Y|, |Xhat|)")
        if q.shape[2] != len(self.xhat_alphabet):
            raise ValueError("kernel last axis must match xhat_alphabet")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise ValueError("kernel entries must be finite and non-negative")
        rows = q.sum(axis=2)
        if np.max(np.abs(rows - 1.0)) > PMF_TOL:
            raise ValueError("every kernel row must sum to 1")
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "xhat_alphabet", tuple(self.xhat_alphabet))
        if self.xhat_values is not None:
            v = np.asarray(self.xhat_values, float)
            if v.shape[0] != q.shape[2]:
                raise ValueError("xhat_values length must match xhat_alphabet")
            object.__setattr__(self, "xhat_values", _frozen(v))

    @classmethod
    def from_rows(cls, q, xhat_alphabet, xhat_values=None) -> "ReconstructionKernel":
        """Build from an approximately stochastic array, cleaning solver noise."""
        q = np.clip(np.asarray(q, float), 0.0, None)
        q = q / q.sum(axis=2, keepdims=True)
        return cls(q, xhat_alphabet, xhat_values)

    @classmethod
    def identity(cls, source: JointSource) -> "ReconstructionKernel":
        q = np.zeros((source.nx, source.ny, source.nx))
        for i in range(source.nx):
            q[i, :, i] = 1.0
        return cls(q, source.x_alphabet, source.x_values)

    @classmethod
    def constant(cls, source: JointSource, index: int) -> "ReconstructionKernel":
        ids, values = source.default_xhat()
        q = np.zeros((source.nx, source.ny, len(ids)))
        q[:, :, index] = 1.0
        return cls(q, ids, values)

    @classmethod
    def memoryless(cls, source: JointSource, channel, xhat_alphabet=None,
                   xhat_values=None) -> "ReconstructionKernel":
        """Kernel q(xhat|x) that ignores y; ``channel`` has shape (|X|, |Xhat|)."""
        channel = np.asarray(channel, float)
        if xhat_alphabet is None:
            xhat_alphabet, xhat_values = source.default_xhat()
        q = np.repeat(channel[:, None, :], source.ny, axis=1)
        return cls(q, xhat_alphabet, xhat_values)

    @property
    def nxhat(self) -> int:
        return len(self.xhat_alphabet)

    def check_compatible(self, source: JointSource) -> None:
        if self.q.shape[:2] != (source.nx, source.ny):
            raise ValueError(
                f"kernel shape {self.q.shape[:2]} incompatible with source "
                f"({source.nx}, {source.ny})")


@dataclass(frozen=True, eq=False)
class DistortionSpec:
    """Distortion table Delta(x, xhat) with its construction mode."""

    table: np.ndarray
    mode: str = "table"

    def __post_init__(self):
        t = np.asarray(self.table, float)
        if t.ndim != 2:
            raise ValueError("distortion table must be 2-D")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValueError("distortion entries must be finite and non-negative")
        if self.mode not in ("table", "mse"):
            raise ValueError(f"unknown distortion mode {self.mode!r}")
        object.__setattr__(self, "table", _frozen(t))

    @classmethod
    def hamming(cls, x_alphabet: Sequence, xhat_alphabet: Optional[Sequence] = None):
        if xhat_alphabet is None:
            xhat_alphabet = x_alphabet
        t = [[0.0 if a == b else 1.0 for b in xhat_alphabet] for a in x_alphabet]
        return cls(np.array(t), "table")

    @classmethod
    def mse(cls, x_values, xhat_values=None):
        if x_values is None:
            raise ValueError("mse distortion requires x embeddings")
        if xhat_values is None:
            xhat_values = x_values
        x = np.asarray(x_values, float)
        xh = np.asarray(xhat_values, float)
        return cls((x[:, None] - xh[None, :]) ** 2, "mse")

    @classmethod
    def for_source(cls, source: JointSource, kind: str = "hamming"):
        ids, values = source.default_xhat()
        if kind == "hamming":
            return cls.hamming(source.x_alphabet, ids)
        if kind == "mse":
            if source.x_values is None or values is None:
                raise ValueError("mse distortion requires embeddings on both alphabets")
            return cls.mse(source.x_values, values)
        raise ValueError(f"unknown distortion kind {kind!r}")


FAMILIES = ("tv", "kl", "w2")


@dataclass(frozen=True)
class DivergenceSpec:
    """Divergence family. W2 is the squared-cost transport value (no root)."""

    family: str = "tv"

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in FAMILIES:
            raise ValueError(f"unknown divergence family {self.family!r}")
        object.__setattr__(self, "family", fam)


@dataclass(frozen=True, eq=False)
class InducedLaws:
    xhat_given_y: np.ndarray      # (|Y|, |Xhat|)
    xhat: np.ndarray              # (|Xhat|,)
    joint: np.ndarray             # (|X|, |Xhat|, |Y|)
    distortion: Optional[float] = None
    distortion_per_y: Optional[np.ndarray] = None


def induced_laws(source: JointSource, kernel: ReconstructionKernel,
                 distortion: Optional[DistortionSpec] = None) -> InducedLaws:
    """Marginalize the kernel against the source."""
    kernel.check_compatible(source)
    q = kernel.q
    joint = np.einsum("xy,xyk->xky", source.pmf, q)
    pxgy = source.p_x_given_y                      # (Y, X)
    xhat_given_y = np.einsum("yx,xyk->yk", pxgy, q)
    xhat = joint.sum(axis=(0, 2))
    if distortion is None:
        return InducedLaws(_frozen(xhat_given_y), _frozen(xhat), _frozen(joint))
    table = distortion.table
    if table.shape != (source.nx, kernel.nxhat):
        raise ValueError(f"distortion table shape {table.shape} does not match "
                         f"({source.nx}, {kernel.nxhat})")
    per_y = np.einsum("yx,xyk,xk->y", pxgy, q, table)
    overall = float(source.p_y @ per_y)
    return InducedLaws(_frozen(xhat_given_y), _frozen(xhat), _frozen(joint),
                       overall, _frozen(per_y))


# -- source-spec files ------------------------------------------------------

_SOURCE_FIELDS = {"x_alphabet", "y_alphabet", "pmf", "x_values", "xhat_values"}


def _parse_number(v, where):
    if isinstance(v, bool):
        raise SourceSpecError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return v
    if isinstance(v, str):
        try:
            return Fraction(v)
        except (ValueError, ZeroDivisionError):
            pass
    raise SourceSpecError(f"{where}: expected a number or 'a/b' string, got {v!r}")


def parse_source(data: dict, origin: str = "<source>") -> JointSource:
    """Strictly parse a decoded source-spec mapping."""
    if not isinstance(data, dict):
        raise SourceSpecError(f"{origin}: top level must be an object")
    unknown = set(data) - _SOURCE_FIELDS
    if unknown:
        raise SourceSpecError(f"{origin}: unknown field(s) {sorted(unknown)}")
    for req in ("x_alphabet", "y_alphabet", "pmf"):
        if req not in data:
            raise SourceSpecError(f"{origin}: missing field '{req}'")
    xa, ya, rows = data["x_alphabet"], data["y_alphabet"], data["pmf"]
    if not isinstance(xa, list) or not xa:
        raise SourceSpecError(f"{origin}: field 'x_alphabet' must be a non-empty list")
    if not isinstance(ya, list) or not ya:
        raise SourceSpecError(f"{origin}: field 'y_alphabet' must be a non-empty list")
    if not isinstance(rows, list) or len(rows) != len(xa):
        raise SourceSpecError(f"{origin}: field 'pmf' must have one row per x symbol")
    table = []
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != len(ya):
            raise SourceSpecError(f"{origin}: field 'pmf[{i}]' must have {len(ya)} entries")
        table.append([_parse_number(v, f"{origin}: field 'pmf[{i}]'") for v in row])
    opt = {}
    for name in ("x_values", "xhat_values"):
        if name in data:
            vals = data[name]
            if not isinstance(vals, list):
                raise SourceSpecError(f"{origin}: field '{name}' must be a list")
            opt[name] = [float(_parse_number(v, f"{origin}: field '{name}'")) for v in vals]
    try:
        if all(isinstance(v, (Fraction, int)) for r in table for v in r):
            return JointSource.from_rational(table, tuple(xa), tuple(ya), **opt)
        return JointSource(tuple(xa), tuple(ya), np.array(table, dtype=float), **opt)
    except ValueError as exc:  # invariant violations
        raise SourceSpecError(f"{origin}: {exc}") from exc


def load_source(path) -> JointSource:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SourceSpecError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_source(data, str(path))


def source_to_dict(source: JointSource) -> dict:
    if source.exact is not None:
        pmf = [[str(v) for v in row] for row in source.exact]
    else:
        pmf = source.pmf.tolist()
    out = {"x_alphabet": list(source.x_alphabet), "y_alphabet": list(source.y_alphabet),
           "pmf": pmf}
    if source.x_values is not None:
        out["x_values"] = source.x_values.tolist()
    if source.xhat_values is not None:
        out["xhat_values"] = source.xhat_values.tolist()
    return out
