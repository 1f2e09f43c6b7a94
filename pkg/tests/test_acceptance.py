"""Acceptance suite: each criterion runs its bundled config end to end.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary, or directly when this file is run as a script.
"""
import csv
import math
import time
from pathlib import Path

import pytest

from rdcp.experiments import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS = {}


def h2(p):
    return 0.0 if p <= 0 or p >= 1 else -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def rows(text):
    return list(csv.DictReader(l for l in text.splitlines() if not l.startswith("#")))


def run_config(name):
    path = CONFIGS / f"{name}.json"
    start = time.perf_counter()
    res, _ = run_experiment(path.read_text(), path.parent, origin=str(path))
    return res, time.perf_counter() - start


def assertion(res, prefix):
    found = [a for a in res.assertions if a.name == prefix or a.name.startswith(prefix + "[")]
    assert found, f"no assertion named {prefix}"
    return found


def record(number, title):
    def wrap(fn):
        def test():
            try:
                note = fn()
            except BaseException as exc:
                RESULTS[number] = f"FAIL  criterion {number:2d} {title}: {exc}".splitlines()[0]
                raise
            RESULTS[number] = f"PASS  criterion {number:2d} {title}" + (f" ({note})" if note else "")
        test.__name__ = fn.__name__
        return test
    return wrap


def all_pass(res, names):
    for name in names:
        for a in assertion(res, name):
            assert a.passed, f"{a.name} failed: {a.detail}"


@record(1, "binary rate-distortion closed form")
def test_rd_closed_form():
    res, secs = run_config("acc01_rd_closed_form")
    all_pass(res, ["closed-form", "monotone"])
    worst = 0.0
    for k, p in enumerate([0.1, 0.2, 0.5]):
        table = rows(res.files[f"rd_curve_{k}.csv"])
        assert len(table) == 20
        for r in table:
            D = float(r["D"])
            worst = max(worst, abs(float(r["rate_bits"]) - max(h2(p) - h2(min(D, p)), 0.0)))
    assert worst <= 1e-3
    assert secs < 10, f"{secs:.1f} s"
    return f"max error {worst:.1e} bits, {secs:.1f} s"


@record(2, "solver agrees with brute force on 2x2x2 instances")
def test_oracle_equivalence():
    res, secs = run_config("acc02_oracle")
    all_pass(res, ["brute-force-agreement"])
    table = rows(res.files["brute_force.csv"])
    assert len({r["source"] for r in table}) == 50
    worst = 0.0
    for r in table:
        err = abs(float(r["solver_bits"]) - float(r["grid_upper_bits"]))
        worst = max(worst, err - float(r["grid_gap_bits"]))
    assert worst <= 1e-3
    assert secs < 300, f"{secs:.0f} s"
    return f"{len(table)} comparisons, worst excess over gap {worst:.1e}, {secs:.0f} s"


@record(3, "monotone and convex in (D, P) under TV")
def test_tradeoff_properties():
    res, _ = run_config("acc03_properties")
    all_pass(res, ["monotonicity", "midpoint-convexity"])
    assert len([f for f in res.files if f.startswith("curve_")]) == 20
    mono, conv = assertion(res, "monotonicity")[0], assertion(res, "midpoint-convexity")[0]
    assert mono.detail["tol"] == 1e-4 and conv.detail["tol"] == 2e-4


@record(4, "perfect perception costs at most half the distortion")
def test_halving():
    res, _ = run_config("acc04_halving")
    all_pass(res, ["perfect-perception-halving"])
    table = rows(res.files["halving.csv"])
    assert {r["divergence"] for r in table} == {"tv", "kl", "w2"}
    assert len({r["source"] for r in table}) == 20


@record(5, "one-shot simulation rate bound and sample law")
def test_oneshot():
    res, _ = run_config("acc05_oneshot")
    all_pass(res, ["rate-bound", "chi-square", "decoder"])
    cells = res.summary
    assert all(c["trials"] == 10 ** 5 for c in cells.values())
    target = cells["bern05_rd01"]
    assert target["information_bits"] == pytest.approx(0.531, abs=1e-3)
    assert target["bound_bits"] == pytest.approx(6.15, abs=0.01)
    return f"{len(cells)} kernels"


@record(6, "decoder resampling doubles MSE and keeps the law")
def test_doubling():
    res, _ = run_config("acc06_pipeline")
    all_pass(res, ["perceptual-law-exact", "mse-doubling-bound", "mse-doubling-equality"])
    return f"{res.summary['pipelines']} pipelines"


@record(7, "two-part overhead at most two bits")
def test_overhead():
    res, _ = run_config("acc07_overhead")
    all_pass(res, ["overhead-bound", "entropy-identity"])
    assert assertion(res, "overhead-bound")[0].detail["pipelines"] == 1000


@record(8, "common-randomness lower bound over the instance corpus")
def test_randomness():
    res, secs = run_config("acc08_randomness")
    all_pass(res, ["lower-bound", "witness-exact"])
    table = rows(res.files["randomness.csv"])
    assert len(table) >= 200
    assert all(float(r["gap_bits"]) >= -1e-12 for r in table)
    assert secs < 600, f"{secs:.0f} s"
    return f"{len(table)} instances, {secs:.1f} s"


@record(9, "float32 Gaussian entropy reproduction")
def test_float_entropy():
    res, secs = run_config("acc09_float_entropy")
    all_pass(res, ["expected-value"])
    bits = res.summary["bits"]
    assert res.summary["samples"] == 10 ** 6
    assert abs(bits - 26.55) <= 0.3
    assert secs < 60, f"{secs:.1f} s"
    return f"{bits:.3f} bits, {secs:.1f} s"


@record(10, "interpolation law along the traversal")
def test_traversal():
    res, _ = run_config("acc10_traversal")
    all_pass(res, ["interpolation-law", "endpoints-exact"])
    assert len([f for f in res.files if f.startswith("traversal_")]) == 10
    for name, text in res.files.items():
        if name.startswith("traversal_"):
            assert len(rows(text)) == 11


@record(11, "entropy coder round trips, length bound, stable goldens")
def test_coder():
    res, _ = run_config("acc11_coder")
    all_pass(res, ["round-trip", "length-bound", "goldens-byte-stable"])
    assert assertion(res, "round-trip")[0].detail["trials"] == 10 ** 4


if __name__ == "__main__":
    for fn in [v for k, v in sorted(globals().items()) if k.startswith("test_")]:
        try:
            fn()
        except Exception:
            pass
    for k in sorted(RESULTS):
        print(RESULTS[k])
