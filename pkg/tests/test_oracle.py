import math

import numpy as np
import pytest

from pcgsd import oracle
from pcgsd.asg_index import GroupIndex, build_groups
from pcgsd.errors import DegenerateResidual
from pcgsd.rng import make_stream

from conftest import R_GROUPS, R_P, R_Q, brute_coarse, random_unit


class TestExact:
    def test_coarse_running_example(self, r_index):
        np.testing.assert_allclose(oracle.exact_coarse(R_P, r_index).probs, [0.6, 0.3, 0.1], atol=1e-15)

    def test_coarse_uniform_singletons(self):
        out = oracle.exact_coarse(np.full(5, 0.2), GroupIndex.singletons(5)).probs
        np.testing.assert_allclose(out, np.full(5, 0.2))

    def test_coarse_against_rational(self):
        rng = np.random.default_rng(0)
        idx = build_groups(random_unit(rng, 10, 2), 0.5)
        p = rng.dirichlet(np.ones(10))
        expected = [float(v) for v in brute_coarse(p.tolist(), [g.tolist() for g in idx.groups], 10)]
        np.testing.assert_allclose(oracle.exact_coarse(p, idx).probs, expected, atol=1e-12)
        assert oracle.exact_coarse(p, idx).probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_emitted_running_example(self, r_index):
        np.testing.assert_allclose(oracle.exact_emitted(R_P, R_Q, r_index).probs, [0.2, 0.4, 0.4], atol=1e-12)

    def test_emitted_identical(self, r_index):
        qc = oracle.exact_coarse(R_Q, r_index).probs
        np.testing.assert_allclose(oracle.exact_emitted(R_Q, R_Q, r_index).probs, qc, atol=1e-15)

    def test_emitted_equals_target_sweep(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            idx = build_groups(random_unit(rng, 16, 3), float(rng.uniform(-0.3, 0.9)))
            p, q = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
            dev = np.abs(oracle.exact_emitted(p, q, idx).probs - oracle.exact_coarse(q, idx).probs).max()
            assert dev <= 1e-12

    def test_residual(self, r_index):
        np.testing.assert_allclose(oracle.exact_residual(R_P, R_Q, r_index).probs, [0, 0.25, 0.75])
        with pytest.raises(DegenerateResidual):
            oracle.exact_residual(R_P, R_P, r_index)

    def test_enumeration_limit(self):
        with pytest.raises(ValueError):
            oracle.weight_matrix(GroupIndex.singletons(10), limit=5)


class TestTV:
    def test_running_example(self):
        assert oracle.tv_distance([0.6, 0.3, 0.1], [0.2, 0.4, 0.4]) == pytest.approx(0.4)

    def test_identity_and_disjoint(self):
        assert oracle.tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert oracle.tv_distance([1, 0, 0], [0, 0.5, 0.5]) == 1.0

    def test_metric_properties(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a, b, c = rng.dirichlet(np.ones(6), size=3)
            ab = oracle.tv_distance(a, b)
            assert ab == pytest.approx(oracle.tv_distance(b, a))
            assert 0 <= ab <= 1
            assert ab <= oracle.tv_distance(a, c) + oracle.tv_distance(c, b) + 1e-15

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            oracle.tv_distance([1.0], [0.5, 0.5])


class TestAnalytic:
    def test_running_example_acceptances(self, r_index):
        assert oracle.pcg_acceptance(R_P, R_Q, r_index) == pytest.approx(0.6, abs=1e-15)
        assert oracle.sd_acceptance(R_P, R_Q) == pytest.approx(0.5, abs=1e-15)
        # .4(.25+.3) + .4(.5+.3) + .1 + .1
        assert oracle.ssd_acceptance(R_P, R_Q, 0.3) == pytest.approx(0.74, abs=1e-15)

    def test_ssd_zero_bias_is_sd(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p, q = rng.dirichlet(np.ones(8), size=2)
            assert oracle.ssd_acceptance(p, q, 0.0) == pytest.approx(oracle.sd_acceptance(p, q), abs=1e-14)
            np.testing.assert_allclose(oracle.ssd_emitted_tokens(p, q, 0.0), q, atol=1e-14)

    def test_ssd_emitted_is_distribution(self):
        rng = np.random.default_rng(3)
        p, q = rng.dirichlet(np.ones(8), size=2)
        out = oracle.ssd_emitted_tokens(p, q, 0.3)
        assert out.sum() == pytest.approx(1.0) and np.all(out >= 0)

    def test_closed_form_tokens(self):
        assert oracle.expected_tokens_per_round(1.0, 3) == 4.0
        assert oracle.expected_tokens_per_round(0.0, 5) == 1.0
        assert oracle.expected_tokens_per_round(0.6, 1) == pytest.approx(1.6)
        assert oracle.modeled_speedup(1.0, 3, 0.0) == 4.0


class TestEmpirical:
    def test_point_mass(self):
        res = oracle.empirical_distribution(lambda: 2, 100, 4, reference=[0, 0, 1, 0])
        assert res.tv == 0.0
        assert res.freqs.tolist() == [0, 0, 1, 0]

    def test_fair_coin(self):
        s = make_stream(0, "instance")
        res = oracle.empirical_distribution(lambda st: st.below(2), 1_000_000, 2, stream=s,
                                            reference=[0.5, 0.5])
        # binomial sigma = 0.0005; 3 sigma on each coordinate
        assert res.tv <= 0.002
        assert res.pvalue > 1e-3

    def test_mass_outside_support_fails(self):
        tv, chi2, pvalue = oracle.goodness_of_fit([5, 5, 1], [0.5, 0.5, 0.0])
        assert math.isinf(chi2) and pvalue == 0.0
        assert tv > 0

    def test_report_dict(self):
        res = oracle.fit_counts([3, 1], [0.75, 0.25])
        d = res.as_dict()
        assert d["tv"] == 0.0 and d["exact"] == [0.75, 0.25]
