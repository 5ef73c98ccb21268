from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcgsd import oracle
from pcgsd.asg_index import EqualSplit, GroupIndex, WeightRule, build_groups, register_weight_rule
from pcgsd.coarse import (
    TokenDistribution,
    accept_prob,
    coarse_mass,
    coarse_vector,
    emit_within_group,
    exact_group_identity_check,
    residual_sample_thinning,
    sample_group_label,
)
from pcgsd.errors import DegenerateProposal
from pcgsd.rng import make_stream

from conftest import R_GROUPS, R_P, R_Q, brute_coarse, random_unit


def _tv(counts, ref):
    counts = np.asarray(counts, dtype=float)
    return 0.5 * np.abs(counts / counts.sum() - np.asarray(ref, dtype=float)).sum()


class TestTokenDistribution:
    def test_validation(self):
        with pytest.raises(ValueError):
            TokenDistribution([0.5, 0.4])
        with pytest.raises(ValueError):
            TokenDistribution([1.5, -0.5])

    def test_never_samples_zero_mass(self):
        d = TokenDistribution([0.0, 0.5, 0.0, 0.5, 0.0])
        s = make_stream(0, "draft")
        assert {d.sample(s) for _ in range(5000)} == {1, 3}


class TestCoarseMass:
    def test_running_example_matches_rational_oracle(self, r_index, r_p, r_q):
        exact_p = brute_coarse(R_P, R_GROUPS, 4)
        exact_q = brute_coarse(R_Q, R_GROUPS, 4)
        assert exact_p == [Fraction(3, 5), Fraction(3, 10), Fraction(1, 10)]
        assert exact_q == [Fraction(1, 5), Fraction(2, 5), Fraction(2, 5)]
        for k in range(3):
            assert coarse_mass(r_p, k, r_index) == pytest.approx(float(exact_p[k]), abs=1e-15)
            assert coarse_mass(r_q, k, r_index) == pytest.approx(float(exact_q[k]), abs=1e-15)

    def test_singletons_collapse(self):
        p = np.random.default_rng(0).dirichlet(np.ones(9))
        idx = GroupIndex.singletons(9)
        assert [coarse_mass(p, t, idx) for t in range(9)] == p.tolist()

    def test_cache_follows_index(self, r_p, r_index):
        other = GroupIndex.singletons(4)
        assert coarse_mass(r_p, 0, r_index) == pytest.approx(0.6)
        assert coarse_mass(r_p, 0, other) == pytest.approx(0.4)
        assert coarse_mass(r_p, 0, r_index) == pytest.approx(0.6)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), theta=st.floats(-0.5, 0.99))
    def test_normalized_without_constants(self, seed, theta):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        idx = build_groups(random_unit(rng, n, 3), theta)
        p = rng.dirichlet(np.ones(n))
        assert abs(coarse_vector(p, idx).sum() - 1.0) <= 1e-9


class TestGroupLabel:
    def test_shared_token_uniform(self, r_index):
        s = make_stream(1, "group")
        counts = np.bincount([sample_group_label(1, r_index, s) for _ in range(40_000)], minlength=3)
        assert counts[2] == 0
        # binomial(40000, 1/2): 3 sigma = 0.0075
        assert abs(counts[0] / 40_000 - 0.5) < 0.0075

    def test_single_membership_is_deterministic(self, r_index):
        s = make_stream(1, "group")
        assert {sample_group_label(0, r_index, s) for _ in range(100)} == {0}

    def test_coupling_million(self, r_index, r_p):
        # x ~ p then K ~ w_{., x} must give P_c = (0.6, 0.3, 0.1)
        sd, sg = make_stream(2, "draft"), make_stream(2, "group")
        counts = [0, 0, 0]
        for _ in range(1_000_000):
            counts[sample_group_label(r_p.sample(sd), r_index, sg)] += 1
        assert _tv(counts, [0.6, 0.3, 0.1]) <= 0.003


class TestAcceptProb:
    def test_running_example(self, r_index, r_p, r_q):
        assert accept_prob(r_p, r_q, 0, r_index) == pytest.approx(1 / 3, abs=1e-15)
        assert accept_prob(r_p, r_q, 1, r_index) == 1.0
        assert accept_prob(r_p, r_q, 2, r_index) == 1.0

    def test_identical_always_one(self, r_index, r_p):
        assert all(accept_prob(r_p, r_p, k, r_index) == 1.0 for k in range(3))

    def test_zero_draft_mass_raises(self, r_index):
        p = TokenDistribution([0.5, 0.0, 0.5, 0.0])
        with pytest.raises(DegenerateProposal):
            accept_prob(p, p, 2, r_index)


class TestResidual:
    def test_running_example_residual_and_trials(self, r_index, r_p, r_q):
        # [Q_c - P_c]_+ = (0, 0.1, 0.3), TV = 0.4
        resid = oracle.exact_residual(r_p, r_q, r_index).probs
        np.testing.assert_allclose(resid, [0.0, 0.25, 0.75], atol=1e-15)
        s = make_stream(3, "residual")
        counts = [0, 0, 0]
        trials = 0
        calls = 1_000_000
        for _ in range(calls):
            r = residual_sample_thinning(r_p, r_q, r_index, s)
            counts[r.group] += 1
            trials += r.trials
            assert not r.fallback
        assert counts[0] == 0
        assert _tv(counts, [0.0, 0.25, 0.75]) <= 0.003
        assert trials / calls == pytest.approx(2.5, rel=0.02)

    def test_emission_inside_group(self, r_index, r_q):
        # group 1 = {1, 2}: q(1)/2 / 0.4 = 0.25, q(2)/0.4 = 0.75
        s = make_stream(4, "residual")
        draws = [emit_within_group(r_q, 1, r_index, s) for _ in range(100_000)]
        frac = np.mean(np.array(draws) == 1)
        assert set(draws) == {1, 2}
        # binomial 3 sigma at 1e5: 0.0041
        assert abs(frac - 0.25) < 0.0041

    def test_emitted_token_belongs_to_group(self):
        rng = np.random.default_rng(7)
        idx = build_groups(random_unit(rng, 12, 3), 0.3)
        p, q = (TokenDistribution(rng.dirichlet(np.ones(12))) for _ in range(2))
        s = make_stream(5, "residual")
        for _ in range(2000):
            r = residual_sample_thinning(p, q, idx, s)
            assert r.token in idx.groups[r.group]
            assert r.trials >= 1

    def test_fallback_when_masses_coincide(self, r_index, r_p):
        r = residual_sample_thinning(r_p, r_p, r_index, make_stream(6, "residual"), max_trials=5)
        assert r.fallback and r.trials == 5
        assert r.token in r_index.groups[r.group]

    def test_singleton_residual_is_token_residual(self):
        rng = np.random.default_rng(8)
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        diff = np.maximum(q - p, 0)
        np.testing.assert_allclose(oracle.exact_residual(p, q, GroupIndex.singletons(6)).probs,
                                   diff / diff.sum(), atol=1e-15)


class TestIdentity:
    def test_running_example(self, r_index, r_p, r_q):
        assert exact_group_identity_check(r_p, r_q, r_index) == 0.0

    def test_identical(self, r_index, r_p):
        assert exact_group_identity_check(r_p, r_p, r_index) == 0.0

    def test_random_sweep(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            idx = build_groups(random_unit(rng, 16, 3), float(rng.uniform(-0.2, 0.9)))
            p, q = rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))
            assert exact_group_identity_check(p, q, idx) <= 1e-12


class HalfFirst(WeightRule):
    """Non-uniform split: first containing group takes half, the rest share the remainder."""

    rule_id = 7
    name = "half-first"

    def token_weights(self, index, t):
        k = len(index.memberships[t])
        if k == 1:
            return np.ones(1)
        return np.r_[0.5, np.full(k - 1, 0.5 / (k - 1))]


class TestPluggableWeights:
    def test_non_uniform_rule_keeps_coupling(self):
        register_weight_rule(HalfFirst())
        idx = build_groups(random_unit(np.random.default_rng(9), 10, 3), 0.2).with_weight_rule("half-first")
        assert not idx.equal_split
        p = TokenDistribution(np.random.default_rng(10).dirichlet(np.ones(10)))
        pc = oracle.exact_coarse(p, idx).probs
        assert abs(pc.sum() - 1) < 1e-12
        np.testing.assert_allclose(coarse_vector(p, idx), pc, atol=1e-15)
        sd, sg = make_stream(11, "draft"), make_stream(11, "group")
        counts = np.zeros(idx.M)
        for _ in range(200_000):
            counts[sample_group_label(p.sample(sd), idx, sg)] += 1
        assert _tv(counts, pc) <= 0.005
