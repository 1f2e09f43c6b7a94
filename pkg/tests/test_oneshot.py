import math

import numpy as np
import pytest

from rdcp.core import DistortionSpec, DivergenceSpec, JointSource, ReconstructionKernel
from rdcp.oneshot import (CandidateCapError, IndexCode, SharedRandomnessStream, oneshot_bound,
                          pfr_decode, pfr_select, simulate_oneshot)
from rdcp.solver import solve_rd

from conftest import h2


def test_stream_is_reproducible_and_trials_disjoint():
    a, b = SharedRandomnessStream(99), SharedRandomnessStream(99)
    e1, u1 = a.block(3, 0)
    e2, u2 = b.block(3, 0)
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_array_equal(u1, u2)
    assert not np.array_equal(a.block(4, 0)[1], u1)
    assert not np.array_equal(a.block(3, 1)[1], u1)


def test_target_equal_reference_selects_first():
    ref = np.array([0.2, 0.3, 0.5])
    stream = SharedRandomnessStream(1)
    for t in range(200):
        K, _ = pfr_select(ref, ref, stream, t)
        assert K == 1
    assert len(IndexCode.of(1)) == 1


def test_point_mass_index_is_geometric():
    n = 4
    ref = np.full(n, 1 / n)
    target = np.eye(n)[2]
    stream = SharedRandomnessStream(5)
    Ks = []
    for t in range(4000):
        K, x = pfr_select(target, ref, stream, t)
        assert x == 2
        # K is the first candidate equal to the target symbol
        assert pfr_decode(K, ref, stream, t) == 2
        Ks.append(K)
    assert np.mean(Ks) == pytest.approx(n, rel=0.06)


def test_bsc_rows_sample_law():
    ref = np.array([0.5, 0.5])
    target = np.array([0.9, 0.1])
    stream = SharedRandomnessStream(11)
    xs = np.array([pfr_select(target, ref, stream, t)[1] for t in range(100_000)])
    emp = np.bincount(xs, minlength=2) / len(xs)
    assert 0.5 * np.abs(emp - target).sum() < 0.01


def test_absolute_continuity_required():
    with pytest.raises(ValueError, match="absolutely continuous"):
        pfr_select(np.array([0.5, 0.5]), np.array([1.0, 0.0]), SharedRandomnessStream(0))


def test_candidate_cap_reports_ratio():
    ref = np.array([1 - 1e-9, 1e-9])
    with pytest.raises(CandidateCapError) as info:
        pfr_select(np.array([0.0, 1.0]), ref, SharedRandomnessStream(0), cap=1000)
    assert info.value.max_ratio == pytest.approx(1e9)


def test_identity_kernel_bound():
    src = JointSource.bernoulli(0.5)
    rep = simulate_oneshot(src, ReconstructionKernel.identity(src), trials=10_000, seed=3,
                           distortion=DistortionSpec.for_source(src))
    assert rep.information == pytest.approx(1.0)
    assert rep.bound == pytest.approx(7.0)
    assert rep.bound_holds and rep.mean_codelength <= 7.0
    assert rep.decoder_mismatches == 0
    np.testing.assert_allclose(rep.per_y_distortion, 0.0)


def test_zero_information_kernel():
    src = JointSource.from_marginal([0.3, 0.7], x_values=[0.0, 1.0])
    k = ReconstructionKernel.memoryless(src, [[0.3, 0.7], [0.3, 0.7]])
    rep = simulate_oneshot(src, k, DivergenceSpec("tv"), trials=10_000, seed=4)
    assert rep.information == pytest.approx(0.0, abs=1e-12)
    assert rep.mean_codelength <= 5.0 + 1.0
    assert rep.empirical_divergence < 0.02


def test_rd_kernel_bound_and_converse():
    src = JointSource.bernoulli(0.5)
    d = DistortionSpec.for_source(src)
    pt = solve_rd(src, d, 0.1)
    rep = simulate_oneshot(src, pt.kernel, trials=20_000, seed=8, distortion=d)
    assert rep.information == pytest.approx(1 - h2(0.1), abs=1e-4)
    assert rep.bound == pytest.approx(6.15, abs=0.01)
    assert rep.bound_holds
    assert rep.above_optimum(pt.rate)
    assert rep.chi_square_passes(1e-3)
    assert rep.per_y_distortion[0] == pytest.approx(0.1, abs=4 * rep.per_y_distortion_se[0])


def test_same_seed_same_report():
    src = JointSource.bernoulli(0.3)
    k = ReconstructionKernel.memoryless(src, [[0.8, 0.2], [0.1, 0.9]])
    a = simulate_oneshot(src, k, trials=2000, seed=17)
    b = simulate_oneshot(src, k, trials=2000, seed=17)
    np.testing.assert_array_equal(a.records, b.records)
    assert a.trial_csv(src, k) == b.trial_csv(src, k)
    c = simulate_oneshot(src, k, trials=2000, seed=18)
    assert not np.array_equal(a.records, c.records)


def test_trial_csv_header():
    src = JointSource.bernoulli(0.5)
    k = ReconstructionKernel.identity(src)
    rep = simulate_oneshot(src, k, trials=5, seed=0)
    lines = rep.trial_csv(src, k).splitlines()
    assert lines[0] == "trial,y,x,xhat,K,codelen_bits"
    assert len(lines) == 6


def test_bound_formula():
    assert oneshot_bound(0.0) == 5.0
    assert oneshot_bound(1.0) == 7.0
    assert oneshot_bound(3.0) == pytest.approx(3 + math.log2(4) + 5)


def test_trials_must_be_positive():
    src = JointSource.bernoulli(0.5)
    with pytest.raises(ValueError):
        simulate_oneshot(src, ReconstructionKernel.identity(src), trials=0)
