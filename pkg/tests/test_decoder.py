import io
import json
import math

import numpy as np
import pytest

from pcgsd import oracle
from pcgsd.asg_index import GroupIndex, build_groups
from pcgsd.decoder import DecodeConfig, generate, pcg_round, sd_round, ssd_round
from pcgsd.errors import ConfigError
from pcgsd.models import MarkovModel, MemorylessModel, clustered_pair, disjoint_pair, running_example
from pcgsd.rng import DecodeStreams, make_stream

from conftest import random_unit


def streams(seed=0):
    return DecodeStreams.for_sequence(seed)


def random_memoryless(seed, n=10, theta=0.3):
    rng = np.random.default_rng(seed)
    idx = build_groups(random_unit(rng, n, 3), theta)
    p, q = rng.dirichlet(np.ones(n), size=2)
    return MemorylessModel(p, role="draft"), MemorylessModel(q), idx


class TestRounds:
    def test_identical_models_emit_lookahead_plus_one(self):
        m = MemorylessModel([0.25, 0.25, 0.5])
        idx = GroupIndex.singletons(3)
        s = streams()
        for _ in range(50):
            rnd = pcg_round(m, m, [], 3, idx, s)
            assert len(rnd.tokens) == 4
            assert [o.accepted for o in rnd.outcomes[:3]] == [True] * 3
            assert rnd.outcomes[3].kind == "bonus"

    def test_disjoint_models_emit_one(self):
        inst = disjoint_pair()
        s = streams()
        for _ in range(50):
            for rnd in (pcg_round(inst.draft, inst.target, [], 3, inst.index, s),
                        sd_round(inst.draft, inst.target, [], 3, s)):
                assert len(rnd.tokens) == 1
                assert rnd.outcomes[0].accepted is False
                assert rnd.tokens[0] in (2, 3)

    @pytest.mark.parametrize("lookahead", [1, 2, 5])
    def test_round_length_bounds(self, lookahead):
        draft, target, idx = random_memoryless(1)
        s = streams(1)
        for _ in range(300):
            rnd = pcg_round(draft, target, [0, 1], lookahead, idx, s)
            assert 1 <= len(rnd.tokens) <= lookahead + 1
            for o in rnd.outcomes:
                if o.kind == "draft" and o.accepted:
                    assert o.emitted == o.drafted
                elif o.kind == "draft":
                    assert o.emitted in idx.groups[o.group]

    def test_rejects_zero_lookahead(self, r_instance):
        with pytest.raises(ValueError):
            pcg_round(r_instance.draft, r_instance.target, [], 0, r_instance.index, streams())

    def test_ssd_zero_bias_matches_sd(self, r_instance):
        a = [sd_round(r_instance.draft, r_instance.target, [], 3, s).tokens
             for s in [streams(4)] for _ in range(200)]
        b = [ssd_round(r_instance.draft, r_instance.target, [], 3, 0.0, s).tokens
             for s in [streams(4)] for _ in range(200)]
        assert a == b

    def test_ssd_full_bias_accepts_everything(self, r_instance):
        s = streams(5)
        for _ in range(100):
            rnd = ssd_round(r_instance.draft, r_instance.target, [], 3, 1.0, s)
            assert all(o.accepted for o in rnd.outcomes[:3])

    def test_ssd_bias_range(self, r_instance):
        with pytest.raises(ValueError):
            ssd_round(r_instance.draft, r_instance.target, [], 3, 1.5, streams())


class TestAcceptanceRates:
    ROUNDS = 100_000

    def _rate(self, method, inst, **kw):
        cfg = DecodeConfig(lookahead=1, **kw)
        tr = generate(method, inst.draft, inst.target, [], int(self.ROUNDS * 1.6), cfg,
                      index=inst.index, streams=streams(11))
        return tr.acceptance_rate, tr.proposals

    def test_running_example_pcg(self, r_instance, r_index):
        assert oracle.pcg_acceptance(r_instance.draft.dist, r_instance.target.dist, r_index) == pytest.approx(0.6)
        rate, n = self._rate("pcg", r_instance)
        assert abs(rate - 0.6) <= 0.01

    def test_running_example_sd(self, r_instance):
        rate, n = self._rate("sd", r_instance)
        assert abs(rate - 0.5) <= 3 * math.sqrt(0.25 / n)

    def test_running_example_ssd(self, r_instance):
        rate, n = self._rate("ssd", r_instance, bias=0.3)
        assert abs(rate - 0.74) <= 3 * math.sqrt(0.74 * 0.26 / n)

    def test_singleton_pcg_equals_sd_analytically(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 33))
            p, q = rng.dirichlet(np.ones(n), size=2)
            idx = build_groups(random_unit(rng, n, 4), 1.0)
            assert abs(oracle.pcg_acceptance(p, q, idx) - oracle.sd_acceptance(p, q)) <= 1e-12

    def test_dominance_on_clustered_pair(self):
        pair = clustered_pair(n=16, n_clusters=4, seed=0)
        idx = build_groups(pair.embeddings, 0.5)
        p, q = pair.draft.dist, pair.target.dist
        a_pcg, a_sd = oracle.pcg_acceptance(p, q, idx), oracle.sd_acceptance(p, q)
        assert a_pcg == pytest.approx(1.0, abs=1e-12)
        assert a_sd < 1.0
        cfg = DecodeConfig(lookahead=3)
        pcg = generate("pcg", pair.draft, pair.target, [], 20_000, cfg, index=idx, streams=streams(2))
        sd = generate("sd", pair.draft, pair.target, [], 20_000, cfg, streams=streams(2))
        assert pcg.acceptance_rate == 1.0
        assert abs(sd.acceptance_rate - a_sd) <= 3 * math.sqrt(a_sd * (1 - a_sd) / sd.proposals)


class TestGenerate:
    def test_empty(self, r_instance):
        tr = generate("pcg", r_instance.draft, r_instance.target, [], 0, index=r_instance.index)
        assert tr.tokens == [] and tr.n_rounds == 0 and tr.speedup == 0.0

    def test_target_only(self, r_instance):
        tr = generate("target-only", None, r_instance.target, [], 100, streams=streams())
        assert len(tr.tokens) == 100
        assert tr.target_calls == 100 and tr.proposals == 0
        assert tr.speedup == 1.0

    def test_pcg_running_example_length_1e4(self, r_instance):
        tr = generate("pcg", r_instance.draft, r_instance.target, [], 10_000, DecodeConfig(lookahead=1),
                      index=r_instance.index, streams=streams(0))
        assert len(tr.tokens) == 10_000
        assert abs(tr.acceptance_rate - 0.6) <= 0.01

    def test_missing_index(self, r_instance):
        with pytest.raises(ConfigError):
            generate("pcg", r_instance.draft, r_instance.target, [], 10)

    def test_unknown_method(self, r_instance):
        with pytest.raises(ConfigError):
            generate("beam", r_instance.draft, r_instance.target, [], 10)

    def test_prompt_is_not_emitted(self):
        m = MarkovModel([[0.0, 1.0], [1.0, 0.0]])
        tr = generate("sd", m, m, [1], 5, DecodeConfig(lookahead=2), streams=streams())
        assert tr.tokens == [0, 1, 0, 1, 0]

    def test_counters(self, r_instance):
        tr = generate("pcg", r_instance.draft, r_instance.target, [], 5000, DecodeConfig(lookahead=3, cost_ratio=0.1),
                      index=r_instance.index, streams=streams(3))
        assert tr.acceptances <= tr.proposals <= tr.drafted == 3 * tr.n_rounds
        assert tr.target_calls == tr.n_rounds
        assert tr.emitted == tr.acceptances + tr.residual_calls + tr.bonus_tokens
        assert tr.cost == pytest.approx(tr.n_rounds * (1 + 3 * 0.1))
        assert tr.speedup == pytest.approx(tr.emitted / (tr.n_rounds * 1.3))
        assert tr.mean_trials is not None and tr.fallbacks == 0

    def test_reproducible(self, r_instance):
        a = generate("pcg", r_instance.draft, r_instance.target, [], 3000, index=r_instance.index, streams=streams(9))
        b = generate("pcg", r_instance.draft, r_instance.target, [], 3000, index=r_instance.index, streams=streams(9))
        assert a.tokens == b.tokens and a.summary() == b.summary()

    def test_jsonl_export(self, r_instance):
        tr = generate("pcg", r_instance.draft, r_instance.target, [], 50, index=r_instance.index, streams=streams())
        buf = io.StringIO()
        tr.write_jsonl(buf)
        lines = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert len(lines) == tr.n_rounds + 1
        assert set(lines[0]["steps"][0]) >= {"position", "drafted", "label", "group", "ratio", "u",
                                             "accepted", "residual", "emitted"}
        assert lines[-1]["summary"]["acceptance_rate"] == tr.acceptance_rate


class TestGroupExactnessMultiStep:
    @pytest.mark.parametrize("lookahead", [1, 2, 3])
    def test_memoryless_emitted_groups(self, lookahead):
        draft, target, idx = random_memoryless(21, n=10, theta=0.3)
        tr = generate("pcg", draft, target, [], 200_000, DecodeConfig(lookahead=lookahead),
                      index=idx, streams=streams(lookahead))
        groups = [g for g in tr.emitted_groups()]
        counts = np.bincount(groups, minlength=idx.M)
        qc = oracle.exact_coarse(target.dist, idx).probs
        assert oracle.tv_distance(counts / counts.sum(), qc) <= 0.005

    def test_markov_groups_match_prefix_conditional(self):
        rng = np.random.default_rng(5)
        n = 6
        idx = build_groups(random_unit(rng, n, 3), 0.3)
        target = MarkovModel(rng.dirichlet(np.ones(n), size=n), rng.dirichlet(np.ones(n)))
        draft = MarkovModel(rng.dirichlet(np.ones(n), size=n), rng.dirichlet(np.ones(n)), role="draft")
        tr = generate("pcg", draft, target, [], 200_000, DecodeConfig(lookahead=3), index=idx, streams=streams(6))
        seq = tr.tokens
        groups = tr.emitted_groups()[:len(seq)]
        joint = np.zeros((n, idx.M))
        for prev, g in zip(seq[:-1], groups[1:]):
            joint[prev, g] += 1
        W = oracle.weight_matrix(idx)
        expected = joint.sum(axis=1, keepdims=True) * (W @ target.table.T).T
        assert oracle.tv_distance(joint / joint.sum(), expected / expected.sum()) <= 0.01

    def test_ssd_breaks_group_law(self):
        # draft piles mass where the target has little; the bias accepts too often
        p = np.array([0.7, 0.1, 0.1, 0.1])
        q = np.array([0.1, 0.1, 0.4, 0.4])
        idx = GroupIndex.from_groups(4, ([0, 1], [1, 2], [3]))
        ssd_groups = oracle.exact_coarse(oracle.ssd_emitted_tokens(p, q, 0.3), idx).probs
        assert oracle.tv_distance(ssd_groups, oracle.exact_coarse(q, idx).probs) > 0.05
