"""End-to-end acceptance checks, one test per criterion.

Every test records a one-line verdict that the terminal summary prints
(see ``conftest.py``), so ``pytest tests/test_acceptance.py`` ends with
an eleven-line PASS/FAIL report.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
from scipy import stats

from attnsearch import cli
from attnsearch import controller as ctl
from attnsearch import curiosity as cur
from attnsearch import supernet as sn
from attnsearch.environment import PlantedEnv, RewardWeights, combine_reward
from attnsearch.scheme import ConnectionScheme, decode, encode, log_prob, realized_probs, sparsity_reward
from attnsearch.search import (
    PlantedSource,
    SearchConfig,
    baseline_hsp,
    baseline_random,
    brute_force,
    proxy_correlation,
    run_search,
)

from oracles import max_relative_error, numeric_gradient

VERDICTS = {}


def verdict(n, ok, detail):
    VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


def first_crossing(run, level=0.9):
    """First iteration (1-based) with p-bar above ``level``; never crossing counts as T + 1."""
    above = np.flatnonzero(np.array(run.pbar_trace) > level)
    return int(above[0]) + 1 if above.size else len(run.pbar_trace) + 1


# -- 1 ----------------------------------------------------------------------

def test_c01_formula_exactness():
    t0 = time.perf_counter()
    checks = [
        (sparsity_reward(ConnectionScheme.ones(18)), 0.0),
        (sparsity_reward(ConnectionScheme.zeros(18)), 1.0),
        (sparsity_reward(decode("001100100101110101")), 0.5),
        (realized_probs([0.7], [1])[0], 0.7),
        (realized_probs([0.7], [0])[0], 0.3),
        (log_prob([0.7], [1]), math.log(0.7)),
        (log_prob([0.7, 0.2], [0, 1]), math.log(0.3) + math.log(0.2)),
        (log_prob(np.full(18, 0.5), decode("001100100101110101")), 18 * math.log(0.5)),
        (combine_reward(RewardWeights(1, 1, 1), 0.5, 0.76, 0.1).total, 1.36),
        (combine_reward(RewardWeights(0, 1, 0), 0.3, 0.81, 7.0).total, 0.81),
        (sn.relative_increment(1.2, 1.0), 20.0),
    ]
    worst = max(abs(a - b) for a, b in checks)
    hsp = [encode(baseline_hsp(6, 2, 0)), encode(baseline_hsp(6, 2, 1)), encode(baseline_hsp(6, 3, 0))]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and hsp == ["101010", "010101", "100100"] and elapsed < 1.0
    verdict(1, ok, f"max abs error {worst:.1e}, hsp {hsp}, {elapsed:.3f}s")


# -- 2 ----------------------------------------------------------------------

def _random_controller(rng):
    m = int(rng.integers(1, 12))
    c = ctl.make_controller((m,), rng, hidden=int(rng.integers(2, 12)),
                            input_dim=int(rng.integers(1, 6)))
    c.input_template = rng.normal(size=c.net.in_dim)
    for a in c.net.arrays():
        a[...] = rng.normal(scale=0.7, size=a.shape)
    return c


def _away_from_kinks(c, margin=1e-3):
    """True when no hidden relu input sits within ``margin`` of zero."""
    z = c.net.weights[0] @ c.input_template + c.net.biases[0]
    raw = ctl.raw_probs(c)
    inside = (raw > 1e-5) & (raw < 1 - 1e-5)
    return np.all(np.abs(z) > margin) and np.all(inside)


def test_c02_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"reinforce": 0.0, "ppo": 0.0, "rnd": 0.0}
    n = 0
    while n < 100:
        c = _random_controller(rng)
        if not _away_from_kinks(c):
            continue
        n += 1
        s = ConnectionScheme(rng.integers(0, 2, c.m))
        reward = float(rng.normal())
        g = ctl.reinforce_gradient(c, s, reward)
        num = numeric_gradient(lambda: reward * log_prob(ctl.raw_probs(c), s), c.net.arrays(),
                               h=1e-4, five_point=True)
        worst["reinforce"] = max(worst["reinforce"], max_relative_error(g.arrays(), num))

        p_now = ctl.controller_probs(c)
        batch = []
        for i in range(int(rng.integers(1, 6))):
            old = np.clip(p_now + 0.1 * rng.normal(size=c.m), 0.05, 0.95)
            batch.append(ctl.TrajectoryRecord(old, ConnectionScheme(rng.integers(0, 2, c.m)),
                                              float(rng.normal()), i))
        ratios = [realized_probs(p_now, r.scheme) / realized_probs(r.probs_old, r.scheme)
                  for r in batch]

        def surrogate():
            p = ctl.raw_probs(c)
            return sum(r.reward * float(w @ np.log(realized_probs(p, r.scheme)))
                       for r, w in zip(batch, ratios)) / len(batch)

        kappa = ctl.ppo_direction(c, batch)
        num = numeric_gradient(surrogate, c.net.arrays(), h=1e-4, five_point=True)
        worst["ppo"] = max(worst["ppo"], max_relative_error(kappa.arrays(), num))

        m = int(rng.integers(1, 19))
        r = cur.make_rnd(m, rng, hidden=int(rng.integers(2, 10)), embed_dim=int(rng.integers(1, 6)))
        sr = ConnectionScheme(rng.integers(0, 2, m))
        g = cur.predictor_gradient(r, sr)
        num = numeric_gradient(lambda: cur.raw_bonus(r, sr), r.predictor.arrays(),
                               h=1e-4, five_point=True)
        worst["rnd"] = max(worst["rnd"], max_relative_error(g.arrays(), num))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"max relative error over 100 configs: {detail}; {elapsed:.1f}s")


# -- 3 ----------------------------------------------------------------------

def test_c03_ppo_reinforce_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        c = _random_controller(rng)
        p = ctl.controller_probs(c)
        batch = [ctl.TrajectoryRecord(p.copy(), ConnectionScheme(rng.integers(0, 2, c.m)),
                                      float(rng.normal()), i) for i in range(8)]
        kappa = ctl.ppo_direction(c, batch).flat()
        ref = np.mean([ctl.reinforce_gradient(c, r.scheme, r.reward).flat() for r in batch], axis=0)
        worst = max(worst, float(np.max(np.abs(kappa - ref))))
    verdict(3, worst <= 1e-12, f"max abs difference {worst:.1e} over 20 controllers")


# -- 4 ----------------------------------------------------------------------

def test_c04_planted_search_optimality():
    t0 = time.perf_counter()
    hits, ranks = 0, []
    for seed in range(10):
        source = PlantedSource(PlantedEnv.generate(m=10, seed=seed))
        cfg = SearchConfig(search_steps=2000, ppo_start=200, stage_sizes=(10,), seed=seed)
        run = run_search(cfg, source)
        ranking = brute_force(source, cfg.weights)
        ranks.append(1 + int(np.sum(ranking.total > run.extracted_reward)))
        hits += ranking.in_top(run.extracted_reward, 0.01)
    elapsed = time.perf_counter() - t0
    ok = hits >= 8 and elapsed < 600
    verdict(4, ok, f"top-1% in {hits}/10 seeds (ranks {ranks}); {elapsed:.0f}s")


# -- 5 ----------------------------------------------------------------------

def test_c05_search_beats_random():
    source = PlantedSource(PlantedEnv.generate(m=18, seed=0))
    w = RewardWeights()
    ean = []
    for seed in range(10):
        run = run_search(SearchConfig(stage_sizes=(18,), seed=seed, weights=w), source)
        ean.append(run.extracted_reward)
    rand = baseline_random(source, w, 180, np.random.default_rng(0)).rewards
    res = stats.ttest_ind(ean, rand, equal_var=False, alternative="greater")
    ok = np.mean(ean) > np.mean(rand) and res.pvalue < 0.05
    verdict(5, ok, f"EAN mean {np.mean(ean):.4f} vs random mean {np.mean(rand):.4f}, "
                   f"one-sided Welch p = {res.pvalue:.1e}")


# -- 6, 7 -------------------------------------------------------------------

def _plain_residual(net, x):
    stage = net.config.block_stage()
    h = x @ net.stem.weights[0].T + net.stem.biases[0]
    for i, p in enumerate(net.blocks):
        if i > 0 and stage[i] != stage[i - 1]:
            q = net.projections[stage[i] - 1]
            h = h @ q.weights[0].T + q.biases[0]
        h = h + (np.maximum(h @ p.weights[0].T + p.biases[0], 0.0) @ p.weights[1].T + p.biases[1])
    return h @ net.head.weights[0].T + net.head.biases[0]


def _share_full(net, x):
    stage = net.config.block_stage()
    h = x @ net.stem.weights[0].T + net.stem.biases[0]
    for i, p in enumerate(net.blocks):
        if i > 0 and stage[i] != stage[i - 1]:
            q = net.projections[stage[i] - 1]
            h = h @ q.weights[0].T + q.biases[0]
        f = np.maximum(h @ p.weights[0].T + p.biases[0], 0.0) @ p.weights[1].T + p.biases[1]
        a = net.attention[stage[i]]
        u = np.maximum(f @ a.weights[0].T + a.biases[0], 0.0)
        h = h + f / (1.0 + np.exp(-(u @ a.weights[1].T + a.biases[1])))
    return h @ net.head.weights[0].T + net.head.biases[0]


def test_c06_gating_identity():
    net = sn.build_supernet(sn.SupernetConfig(), np.random.default_rng(6))
    x = np.random.default_rng(60).normal(size=(100, 16))
    ours = sn.forward(net, ConnectionScheme.zeros(18, (6, 6, 6)), x)
    same = ours.tobytes() == _plain_residual(net, x).tobytes()
    verdict(6, same, "all-zero forward bitwise equal to plain residual on 100 inputs"
            if same else "all-zero forward differs from plain residual")


def test_c07_share_full_equivalence():
    net = sn.build_supernet(sn.SupernetConfig(), np.random.default_rng(7))
    x = np.random.default_rng(70).normal(size=(100, 16))
    diff = float(np.max(np.abs(sn.forward(net, ConnectionScheme.ones(18, (6, 6, 6)), x)
                               - _share_full(net, x))))
    verdict(7, diff <= 1e-12, f"max abs difference {diff:.1e}")


# -- 8 ----------------------------------------------------------------------

def correlation_for_seed(seed, config=None):
    """Pearson r on the default toy task generated from ``seed``."""
    config = config or sn.SupernetConfig(data_seed=seed)
    d = cli.DEFAULTS
    data = sn.make_dataset(seed, config.input_dim, config.n_classes, d["n_train"], d["n_val"],
                           d["n_test"], d["clusters_per_class"], d["spread"])
    rng = np.random.default_rng(seed)
    net = sn.build_supernet(config, rng)
    sn.pretrain(net, data, config.pretrain_steps, rng)
    schemes = sn.random_density_schemes(config, 20, np.random.default_rng([seed, 1]))
    return proxy_correlation(net, schemes, data, d["correlate_seeds"]).r


@pytest.mark.slow
def test_c08_proxy_fidelity():
    t0 = time.perf_counter()
    rs = [correlation_for_seed(seed) for seed in range(10)]
    elapsed = time.perf_counter() - t0
    good = sum(r > 0.3 for r in rs)
    ok = good >= 8 and elapsed < 1800
    verdict(8, ok, f"r > 0.3 in {good}/10 seeds (r = {np.round(rs, 2).tolist()}); {elapsed:.0f}s")


# -- 9 ----------------------------------------------------------------------

def test_c09_curiosity_effect():
    # long enough that p-bar really crosses 0.9; at T=2000 nearly every run ties at T + 1
    steps = 5000
    ok_seeds, pairs = 0, []
    for seed in range(10):
        source = PlantedSource(PlantedEnv.generate(m=10, seed=seed))
        with_c = run_search(SearchConfig(stage_sizes=(10,), seed=seed, search_steps=steps), source)
        without = run_search(SearchConfig(stage_sizes=(10,), seed=seed, search_steps=steps,
                                          weights=RewardWeights(0.5, 1.0, 0.0)), source)
        a, b = first_crossing(with_c), first_crossing(without)
        pairs.append((a, b))
        ok_seeds += a >= b
    verdict(9, ok_seeds >= 7, f"crossing(with) >= crossing(without) in {ok_seeds}/10 seeds {pairs}")


# -- 10 ---------------------------------------------------------------------

def test_c10_timing_harness(monkeypatch):
    cfg = sn.SupernetConfig()
    jitter = sn.time_increment(cfg, ConnectionScheme.zeros(18, (6, 6, 6)), batch_size=50,
                               repetitions=300, runs=9)
    order = np.random.default_rng(10).permutation(18)
    nested = []
    for k in (0, 6, 12, 18):
        bits = np.zeros(18, dtype=int)
        bits[order[:k]] = 1
        nested.append(sn.time_increment(cfg, ConnectionScheme(bits, (6, 6, 6)), batch_size=50,
                                        repetitions=300, runs=9))
    monotone = all(b >= a - 2.0 for a, b in zip(nested, nested[1:]))

    shapes = []
    real_forward = sn.forward
    monkeypatch.setattr(sn, "forward", lambda net, s, x: shapes.append(x.shape) or real_forward(net, s, x))
    sn.time_increment(cfg, ConnectionScheme.ones(18, (6, 6, 6)), repetitions=3, runs=2)
    batch_ok = set(shapes) == {(50, 16)} and len(shapes) == 2 + 2 * 2 * 3

    ok = abs(jitter) < 2.0 and monotone and batch_ok
    verdict(10, ok, f"self-increment {jitter:+.2f}%, nested {np.round(nested, 1).tolist()}%, "
                    f"batch-50 protocol {'honored' if batch_ok else 'violated'}")


# -- 11 ---------------------------------------------------------------------

def test_c11_protocol_equivalence(tmp_path):
    base = {"pretrain_steps": 200, "search_steps": 120, "ppo_start": 30}
    cfg_path = tmp_path / "pre.json"
    cfg_path.write_text(json.dumps(base))
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "pre")]) == 0
    search_cfg = tmp_path / "search.json"
    search_cfg.write_text(json.dumps(base | {"checkpoint": str(tmp_path / "pre")}))

    assert cli.main(["search", "--config", str(search_cfg), "--env", "supernet",
                     "--out", str(tmp_path / "local")]) == 0
    server = (f"exec:{sys.executable} -m attnsearch.cli serve --config {search_cfg} "
              f"--out {tmp_path / 'serve'}")
    assert cli.main(["search", "--config", str(search_cfg), "--env", f"external:{server}",
                     "--out", str(tmp_path / "remote")]) == 0

    def g_vals(name):
        lines = (tmp_path / name / "run.jsonl").read_text().splitlines()
        return [(json.loads(x)["scheme"], json.loads(x)["g_val"]) for x in lines]

    local, remote = g_vals("local"), g_vals("remote")
    same = len(local) == 120 and [repr(v) for v in local] == [repr(v) for v in remote]
    verdict(11, same, f"{len(local)} in-process vs {len(remote)} wire g_val values, "
                      f"{'byte-identical' if same else 'different'}")
