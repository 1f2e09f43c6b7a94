import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdcp.codec import (NondeterministicSideInfoError, NotPosteriorMeanError, CodecPipeline,
                        attach_posterior_decoder, decode_batch, decode_instance, design_mse_codec,
                        dp_traversal, encode_batch, encode_instance, overhead_audit,
                        random_embedded_source, random_pipeline, set_partitions, transmit)
from rdcp.core import DivergenceSpec, JointSource
from rdcp.divergence import conditional_divergence

QUAD = JointSource.from_marginal([0.25] * 4, x_values=[0.0, 1.0, 2.0, 3.0])
PARITY = JointSource((0, 1, 2, 3), ("even", "odd"),
                     [[0.25, 0], [0, 0.25], [0.25, 0], [0, 0.25]], x_values=[0, 1, 2, 3])


def quad_pipeline(m=2):
    return attach_posterior_decoder(design_mse_codec(QUAD, m))


class TestDesign:
    def test_lossless(self):
        p = design_mse_codec(QUAD, 4)
        assert p.mse() == 0.0
        assert sorted(p.assign[:, 0]) == [0, 1, 2, 3]

    def test_single_cell(self):
        src = random_embedded_source(np.random.default_rng(2), (4, 4), (2, 2))
        p = design_mse_codec(src, 1)
        v = src.x_values
        var = src.p_x_given_y @ v ** 2 - (src.p_x_given_y @ v) ** 2
        assert p.mse() == pytest.approx(float(src.p_y @ var), abs=1e-12)
        xhat = [p.g1[p.assign[0, j], j] for j in range(src.ny)]
        np.testing.assert_allclose(xhat, src.p_x_given_y @ v, atol=1e-12)

    def test_four_point_example(self):
        p = design_mse_codec(QUAD, 2)
        assert list(p.assign[:, 0]) == [0, 0, 1, 1]
        np.testing.assert_allclose(p.g1[:, 0], [0.5, 2.5])
        assert p.mse() == pytest.approx(0.25)

    def test_budget_above_alphabet_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            p = design_mse_codec(QUAD, 9)
        assert p.n_labels == 4

    def test_missing_embeddings(self):
        src = JointSource((0, 1), ("*",), [[0.5], [0.5]])
        with pytest.raises(ValueError, match="embedding"):
            design_mse_codec(src, 1)

    def test_zero_budget(self):
        with pytest.raises(ValueError):
            design_mse_codec(QUAD, 0)

    def test_no_dead_codes_conditional(self):
        for seed in range(20):
            p = random_pipeline(np.random.default_rng(seed), conditional=True)
            assert p.dead_codes() == []

    def test_exhaustive_beats_every_partition(self):
        src = JointSource.from_marginal([0.1, 0.2, 0.3, 0.15, 0.25], x_values=[0, 1, 3, 4, 9])
        best = design_mse_codec(src, 2).mse()
        w, v = src.p_x, src.x_values
        for labels in set_partitions(5, 2):
            cost = 0.0
            for c in range(2):
                sel = labels == c
                if sel.any():
                    mu = w[sel] @ v[sel] / w[sel].sum()
                    cost += w[sel] @ (v[sel] - mu) ** 2
            assert best <= cost + 1e-12

    def test_lloyd_above_exhaustive_limit(self):
        src = JointSource.from_marginal(np.full(12, 1 / 12), x_values=np.arange(12.0))
        p = design_mse_codec(src, 3)
        assert p.method == "lloyd"
        assert p.mse() == pytest.approx(2 * (1 / 12) * (1.5 ** 2 + 0.5 ** 2) * 3 / 1, rel=1e-9)


class TestPosteriorDecoder:
    def test_lossless_is_identity(self):
        p = attach_posterior_decoder(design_mse_codec(QUAD, 4))
        for m in range(4):
            row = p.g2[m, 0]
            assert row.max() == 1.0

    def test_single_cell_gives_prior(self):
        p = attach_posterior_decoder(design_mse_codec(QUAD, 1))
        np.testing.assert_allclose(p.g2[0, 0], [0.25] * 4)
        for fam in ("tv", "kl", "w2"):
            assert np.max(np.abs(p.perceptual_law_given_y() - QUAD.p_x_given_y)) == 0.0

    def test_doubling_equality(self):
        p = quad_pipeline()
        assert p.perceptual_mse_per_y()[0] == pytest.approx(0.5, abs=1e-15)

    def test_rejects_non_posterior_mean(self):
        p = design_mse_codec(QUAD, 2).with_decoder(np.array([[0.4], [2.5]]))
        with pytest.raises(NotPosteriorMeanError):
            attach_posterior_decoder(p)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_perfect_conditional_perception(self, seed):
        p = random_pipeline(np.random.default_rng(seed))
        src = p.source
        assert np.max(np.abs(p.perceptual_law_given_y() - src.p_x_given_y)) <= 1e-12
        assert np.max(np.abs(p.perceptual_law() - src.p_x)) <= 1e-12
        mse, pmse = p.mse_per_y(), p.perceptual_mse_per_y()
        assert np.all(pmse <= 2 * mse + 1e-12)
        np.testing.assert_allclose(pmse, 2 * mse, atol=1e-12)


class TestInstances:
    def test_golden_instance(self):
        rec = transmit(quad_pipeline(), 3, "*")
        assert rec.m == 1 and rec.xhat == 2.5 and rec.bits_y == 0

    def test_alpha_endpoints(self):
        p = quad_pipeline()
        enc = encode_instance(p, 1, "*")
        r0 = decode_instance(p, enc, 0.0, seed=4)
        r1 = decode_instance(p, enc, 1.0, seed=4)
        rh = decode_instance(p, enc, 0.5, seed=4)
        assert r0.x_alpha == r0.xhat
        assert r1.x_alpha == r1.xtilde
        assert rh.x_alpha == pytest.approx(0.5 * rh.xhat + 0.5 * rh.xtilde)

    def test_alpha_range(self):
        p = quad_pipeline()
        with pytest.raises(ValueError):
            decode_instance(p, encode_instance(p, 1, "*"), 1.5)

    def test_unknown_symbol(self):
        with pytest.raises(KeyError):
            encode_instance(quad_pipeline(), 7, "*")

    def test_batch_accounting(self):
        p = attach_posterior_decoder(design_mse_codec(PARITY, 2))
        pairs = [(0, "even"), (1, "odd"), (3, "odd"), (2, "even"), (2, "even")]
        stream, sizes = encode_batch(p, pairs)
        recs = decode_batch(p, stream, len(pairs), 0.0, seed=1)
        assert sum(a + b for a, b in sizes) == len(stream)
        assert [(r.bits_y, r.bits_m) for r in recs] == sizes
        assert [r.y for r in recs] == [y for _, y in pairs]
        for (x, y), r in zip(pairs, recs):
            assert r.m == p.assign[x, p.source.y_alphabet.index(y)]

    def test_serialization_round_trip(self):
        p = attach_posterior_decoder(design_mse_codec(PARITY, 2))
        text = p.to_json()
        back = CodecPipeline.from_json(text)
        assert back.to_json() == text
        np.testing.assert_array_equal(back.g2, p.g2)
        assert json.loads(text)["version"] == 1

    def test_serialization_version_checked(self):
        d = json.loads(quad_pipeline().to_json())
        d["version"] = 99
        with pytest.raises(ValueError, match="version"):
            CodecPipeline.from_dict(d)


class TestOverhead:
    def test_single_y(self):
        rep = overhead_audit(quad_pipeline())
        assert rep.R_Y == 0.0
        assert rep.R_M == pytest.approx(rep.R)
        assert rep.slack == pytest.approx(2.0)

    def test_parity_identity(self):
        p = attach_posterior_decoder(design_mse_codec(PARITY, 4))
        rep = overhead_audit(p)
        assert rep.H_M == pytest.approx(2.0, abs=1e-12)
        assert rep.H_M_given_Y + rep.H_Y == pytest.approx(rep.H_M, abs=1e-12)
        assert rep.H_Y_given_M == pytest.approx(0.0, abs=1e-12)
        assert rep.holds

    def test_requires_deterministic_y(self):
        src = JointSource((0, 1), (0, 1), [[0.4, 0.1], [0.1, 0.4]], x_values=[0, 1])
        p = attach_posterior_decoder(design_mse_codec(src, 1))
        with pytest.raises(NondeterministicSideInfoError):
            overhead_audit(p)

    def test_randomized(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            rep = overhead_audit(random_pipeline(rng, deterministic_y=True))
            assert rep.R_M + rep.R_Y <= rep.R + 2 + 1e-12
            assert rep.identity_gap <= 1e-10


class TestTraversal:
    def test_endpoints_and_midpoint(self):
        p = quad_pipeline()
        curve = dp_traversal(p, [0.0, 0.5, 1.0], trials=20_000, seed=2)
        a0, ah, a1 = curve.points
        assert a0.mse == pytest.approx(0.25, abs=1e-15)
        assert ah.mse == pytest.approx(1.25 * 0.25, abs=1e-12)
        assert a1.mse == pytest.approx(0.5, abs=1e-12)
        assert a1.divergence == pytest.approx(0.0, abs=1e-12)
        assert a1.divergence < ah.divergence < a0.divergence
        assert all(pt.within(3) for pt in curve.points)

    def test_alpha_zero_divergence_is_point_mass_law(self):
        p = quad_pipeline()
        pt = dp_traversal(p, [0.0], trials=10, seed=0).points[0]
        # W2 between uniform {0,1,2,3} and half/half {0.5, 2.5}
        assert pt.divergence == pytest.approx(0.25, abs=1e-12)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            dp_traversal(quad_pipeline(), [1.2], trials=10)

    def test_csv(self):
        text = dp_traversal(quad_pipeline(), [0.0, 1.0], trials=100, seed=0).to_csv()
        assert text.splitlines()[0] == "alpha,mse,divergence,mse_predicted"
        assert "np.float64" not in text

    @pytest.mark.parametrize("fam", ["tv", "kl"])
    def test_other_families_reported(self, fam):
        curve = dp_traversal(quad_pipeline(), [0.0, 0.5, 1.0], DivergenceSpec(fam), trials=100)
        assert curve.points[-1].divergence == pytest.approx(0.0, abs=1e-12)
