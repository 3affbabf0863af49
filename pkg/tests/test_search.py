import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsearch import search as se
from attnsearch.environment import PlantedEnv, RewardWeights
from attnsearch.scheme import ConnectionScheme, decode, encode, sparsity_reward

from oracles import enumerate_schemes, planted_value


def planted_source(m=10, seed=0):
    return se.PlantedSource(PlantedEnv.generate(m=m, seed=seed))


def cfg(m=10, **kw):
    kw.setdefault("search_steps", 200)
    kw.setdefault("ppo_start", min(20, kw["search_steps"]) or 1)
    return se.SearchConfig(stage_sizes=(m,), **kw)


class FlakySource(se.PlantedSource):
    """Planted source that raises once on call number ``fail_at``."""

    def __init__(self, env, fail_at):
        super().__init__(env)
        self.calls = 0
        self.fail_at = fail_at

    def live(self, scheme, rng):
        self.calls += 1
        if self.calls == self.fail_at:
            raise ConnectionError("evaluator went away")
        return super().live(scheme, rng)


class TestSearchConfig:
    def test_defaults(self):
        c = se.SearchConfig()
        assert (c.search_steps, c.ppo_start) == (2000, 200)
        assert c.weights == RewardWeights()

    @pytest.mark.parametrize("kw", [
        {"search_steps": 10, "ppo_start": 0},
        {"search_steps": 10, "ppo_start": 11},
        {"learning_rate": 0.0},
        {"search_steps": -1},
        {"replay_sample": 0},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            se.SearchConfig(**kw)

    def test_stage_mismatch(self):
        with pytest.raises(ValueError):
            se.run_search(cfg(m=6), planted_source(m=10))


class TestRunSearch:
    def test_zero_budget(self):
        run = se.run_search(se.SearchConfig(search_steps=0, stage_sizes=(10,)), planted_source())
        assert run.records == []
        assert run.extracted == ConnectionScheme.zeros(10)
        assert run.best_scheme is None

    @pytest.mark.parametrize("seed", range(10))
    def test_sparsity_only_gives_all_zero(self, seed):
        c = cfg(search_steps=2000, ppo_start=200, weights=RewardWeights(1, 0, 0), seed=seed)
        run = se.run_search(c, planted_source(seed=seed))
        assert run.extracted == ConnectionScheme.zeros(10)

    def test_log_fields_and_length(self, tmp_path):
        path = tmp_path / "run.jsonl"
        run = se.run_search(cfg(search_steps=50), planted_source(), log_path=path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert len(lines) == 50 == len(run.records)
        assert [r["iter"] for r in lines] == list(range(1, 51))
        assert set(lines[0]) == {"iter", "scheme", "probs", "g_spa", "g_val", "g_val_true",
                                 "g_rnd", "G", "pbar"}

    def test_log_matches_offline_oracle(self):
        source = planted_source(seed=3)
        env = source.env
        w = RewardWeights()
        run = se.run_search(cfg(search_steps=150, seed=3, weights=w), source)
        for r in run.records:
            s = decode(r["scheme"])
            assert r["g_spa"] == sparsity_reward(s)
            assert r["g_val_true"] == env.noiseless(s)
            assert r["g_val_true"] == pytest.approx(
                planted_value(env.utilities, env.interactions, env.base, s.bits), abs=1e-12)
            assert r["G"] == pytest.approx(
                w.lambda1 * r["g_spa"] + w.lambda2 * r["g_val"] + w.lambda3 * r["g_rnd"], abs=1e-12)
            assert abs(r["g_val"] - r["g_val_true"]) < 0.06

    def test_best_seen_monotone_and_dominated(self):
        source = planted_source(seed=4)
        w = RewardWeights()
        run = se.run_search(cfg(search_steps=300, seed=4), source)
        assert all(b >= a for a, b in zip(run.best_trace, run.best_trace[1:]))
        best = se.brute_force(source, w).best()[1]
        assert run.best_reward <= best + 1e-12
        assert run.extracted_reward <= best + 1e-12
        assert run.best_reward == pytest.approx(se.true_reward(source, w, run.best_scheme), abs=0)

    def test_same_seed_identical(self):
        a = se.run_search(cfg(seed=5), planted_source())
        b = se.run_search(cfg(seed=5), planted_source())
        assert a.records == b.records

    def test_seed_isolation(self):
        a = se.run_search(cfg(seed=1, search_steps=30), planted_source())
        b = se.run_search(cfg(seed=2, search_steps=30), planted_source())
        assert [r["scheme"] for r in a.records] != [r["scheme"] for r in b.records]

    def test_pbar_recorded(self):
        run = se.run_search(cfg(search_steps=40), planted_source())
        assert len(run.pbar_trace) == 40
        assert all(0.0 < p < 1.0 for p in run.pbar_trace)
        assert run.pbar_trace[0] == pytest.approx(0.5, abs=1e-12)

    def test_summary(self):
        run = se.run_search(cfg(search_steps=20), planted_source())
        s = run.summary({"k": 1})
        assert s["iterations"] == 20 and s["config"] == {"k": 1}
        assert decode(s["extracted_scheme"]) == run.extracted
        assert len(s["final_probs"]) == 10


class TestAbortResume:
    def test_abort_flushes_log_and_resumes_identically(self, tmp_path):
        env = PlantedEnv.generate(m=10, seed=0)
        c = cfg(search_steps=80, seed=6)
        full = se.run_search(c, se.PlantedSource(env))

        log = tmp_path / "run.jsonl"
        with pytest.raises(se.SearchAborted) as err:
            se.run_search(c, FlakySource(env, fail_at=41), log_path=log, checkpoint_dir=tmp_path / "ck")
        assert len(log.read_text().splitlines()) == 40
        assert len(err.value.run.records) == 40
        assert err.value.checkpoint is not None

        rest = se.run_search(c, se.PlantedSource(env), log_path=log, resume_from=tmp_path / "ck")
        logged = [json.loads(x) for x in log.read_text().splitlines()]
        assert logged == full.records
        assert rest.records == full.records[40:]
        assert rest.extracted == full.extracted
        assert rest.best_trace == full.best_trace

    def test_resume_with_curiosity_and_ppo(self, tmp_path):
        env = PlantedEnv.generate(m=8, seed=1)
        c = cfg(m=8, search_steps=60, ppo_start=10, seed=7, rnd_normalize=True)
        full = se.run_search(c, se.PlantedSource(env))
        with pytest.raises(se.SearchAborted):
            se.run_search(c, FlakySource(env, fail_at=25), checkpoint_dir=tmp_path)
        rest = se.run_search(c, se.PlantedSource(env), resume_from=tmp_path)
        assert rest.records == full.records[24:]


class TestBruteForce:
    def test_m2_sparsity_ordering(self):
        env = PlantedEnv(np.zeros(2), np.zeros((2, 2)), base=0.5)
        r = se.brute_force(env, RewardWeights(1, 1, 0))
        assert [encode(s) for s, _ in r.top(4)] == ["00", "01", "10", "11"]
        assert [g for _, g in r.top(4)] == [1.5, 1.0, 1.0, 0.5]

    def test_length(self):
        assert len(se.brute_force(PlantedEnv.generate(m=7), RewardWeights())) == 128

    def test_m4_matches_hand_enumeration(self):
        env = PlantedEnv.generate(m=4, seed=8, n_interactions=2)
        w = RewardWeights()
        ref = max(enumerate_schemes(4), key=lambda b: (
            w.lambda1 * (1 - sum(b) / 4)
            + w.lambda2 * planted_value(env.utilities, env.interactions, env.base, b)))
        assert se.brute_force(env, w).best()[0].bits == tuple(ref)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_scores_match_scalar_path(self, m, seed):
        source = planted_source(m=m, seed=seed)
        w = RewardWeights()
        r = se.brute_force(source, w)
        totals = [se.true_reward(source, w, r.scheme(k)) for k in range(1, len(r) + 1)]
        np.testing.assert_allclose(r.total, totals, rtol=0, atol=1e-12)
        assert all(a >= b for a, b in zip(r.total, r.total[1:]))

    def test_ties_break_lexicographically(self):
        env = PlantedEnv(np.zeros(3), np.zeros((3, 3)), base=0.5)
        r = se.brute_force(env, RewardWeights(0, 1, 0))
        assert [encode(s) for s, _ in r.top(8)] == [format(i, "03b") for i in range(8)]

    def test_function_source(self):
        src = se.FunctionSource(lambda s: s.popcount() / s.m, (2, 2))
        r = se.brute_force(src, RewardWeights(0, 1, 0))
        assert encode(r.best()[0]) == "11/11"

    def test_rejects_large_m(self):
        with pytest.raises(ValueError):
            se.brute_force(se.PlantedSource(PlantedEnv.generate(m=25)), RewardWeights())

    def test_threshold(self):
        r = se.brute_force(PlantedEnv.generate(m=10), RewardWeights())
        assert r.threshold(0.01) == float(r.total[10])
        assert r.in_top(float(r.total[0]), 0.01)
        assert not r.in_top(float(r.total[-1]), 0.01)

    def test_csv(self, tmp_path):
        r = se.brute_force(PlantedEnv.generate(m=5), RewardWeights())
        path = tmp_path / "ranking.csv"
        r.write_csv(path)
        rows = list(csv.DictReader(path.open()))
        assert list(rows[0]) == ["scheme", "rank", "g_spa", "g_val", "G"]
        assert len(rows) == 32
        assert float(rows[0]["G"]) == float(r.total[0])
        assert decode(rows[3]["scheme"]) == r.scheme(4)


class TestBaselines:
    def test_random_single_draw(self):
        res = se.baseline_random(planted_source(), RewardWeights(), 1, np.random.default_rng(0))
        assert res.best == res.schemes[0]

    def test_random_seeded(self):
        a = se.baseline_random(planted_source(), RewardWeights(), 50, np.random.default_rng(3))
        b = se.baseline_random(planted_source(), RewardWeights(), 50, np.random.default_rng(3))
        assert a.rewards.tobytes() == b.rewards.tobytes()

    def test_random_dominated_by_brute_force(self):
        source = planted_source()
        res = se.baseline_random(source, RewardWeights(), 180, np.random.default_rng(1))
        assert res.best_reward <= se.brute_force(source, RewardWeights()).best()[1]
        assert res.best_reward == res.rewards.max()

    def test_random_rejects_zero(self):
        with pytest.raises(ValueError):
            se.baseline_random(planted_source(), RewardWeights(), 0, np.random.default_rng(0))

    @pytest.mark.parametrize("period,offset,text", [
        (2, 0, "101010"), (2, 1, "010101"), (3, 0, "100100"),
    ])
    def test_hsp(self, period, offset, text):
        assert encode(se.baseline_hsp(6, period, offset)) == text

    @pytest.mark.parametrize("period,offset", [(0, 0), (7, 0), (3, 3), (3, -1)])
    def test_hsp_rejects(self, period, offset):
        with pytest.raises(ValueError):
            se.baseline_hsp(6, period, offset)

    def test_hsp_stages(self):
        assert encode(se.baseline_hsp(6, 3, 0, (3, 3))) == "100/100"


class TestPearson:
    def test_identity(self):
        assert se.pearson([0.1, 0.5, 0.3], [0.1, 0.5, 0.3]) == pytest.approx(1.0, abs=1e-15)

    def test_negation(self):
        assert se.pearson([1, 2, 4], [-1, -2, -4]) == pytest.approx(-1.0, abs=1e-15)

    def test_constant_series(self):
        with pytest.raises(se.UndefinedCorrelationError):
            se.pearson([1, 2, 3], [0.5, 0.5, 0.5])

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=30))
    def test_matches_numpy(self, pairs):
        x, y = np.array(pairs).T
        if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
            return
        assert se.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-9)

    def test_proxy_correlation_with_injected_scratch(self):
        from attnsearch import supernet as sn

        cfg_ = sn.SupernetConfig(stage_sizes=(2, 2), stage_widths=(4, 4), input_dim=4, n_classes=3)
        data = sn.make_dataset(0, input_dim=4, n_classes=3, n_train=256, n_val=256, n_test=64)
        net = sn.build_supernet(cfg_, np.random.default_rng(0))
        sn.pretrain(net, data, 100, np.random.default_rng(1))
        schemes = [ConnectionScheme(b, (2, 2)) for b in enumerate_schemes(4)]
        proxy = {s: sn.proxy_eval(net, s, data) for s in schemes}
        res = se.proxy_correlation(net, schemes, data, [0], scratch=lambda s, seed: proxy[s])
        assert res.r == pytest.approx(1.0, abs=1e-12)
        neg = se.proxy_correlation(net, schemes, data, [0], scratch=lambda s, seed: -proxy[s])
        assert neg.r == pytest.approx(-1.0, abs=1e-12)

    def test_proxy_correlation_needs_three(self):
        with pytest.raises(ValueError):
            se.proxy_correlation(None, [ConnectionScheme([1])] * 2, None, [0])

    def test_nan_free(self):
        assert not math.isnan(se.pearson([0, 1, 2], [1, 0, 3]))
