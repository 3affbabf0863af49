"""The search loop, exhaustive ground truth, baselines and proxy-fidelity analysis.

One search iteration:

1. p <- controller(x0); sample a ~ Bernoulli(p)
2. score g_spa, g_val, g_rnd and combine them into G
3. policy-gradient step on G * log p(a); one predictor step on a
4. push (p, a, G) into the replay buffer
5. from iteration ``ppo_start`` on, one importance-weighted step on a
   replayed batch
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import controller as ctl
from . import curiosity as cur
from . import nn
from .environment import PlantedEnv, RewardWeights, combine_reward
from .scheme import ConnectionScheme, all_schemes, encode, sample_bernoulli, sparsity_reward

log = logging.getLogger(__name__)

MAX_BRUTE_FORCE_M = 24


@dataclass
class SearchConfig:
    search_steps: int = 2000
    ppo_start: int = 200
    learning_rate: float = ctl.DEFAULT_LR
    weights: RewardWeights = field(default_factory=RewardWeights)
    replay_capacity: int = 64
    replay_sample: int = 8
    seed: int = 0
    stage_sizes: tuple[int, ...] = (18,)
    controller_hidden: int = ctl.DEFAULT_HIDDEN
    controller_input_dim: int = ctl.DEFAULT_INPUT_DIM
    rnd_hidden: int = cur.DEFAULT_HIDDEN
    rnd_embed: int = cur.DEFAULT_EMBED
    rnd_lr: float = cur.DEFAULT_LR
    rnd_normalize: bool = False
    ppo_clip: float | None = None

    def __post_init__(self):
        self.stage_sizes = tuple(int(s) for s in self.stage_sizes)
        if self.search_steps < 0:
            raise ValueError("search_steps must be >= 0")
        if self.search_steps and not 1 <= self.ppo_start <= self.search_steps:
            raise ValueError("ppo_start must satisfy 1 <= ppo_start <= search_steps")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.replay_capacity < 1 or self.replay_sample < 1:
            raise ValueError("replay capacity and sample size must be >= 1")

    @property
    def m(self):
        return sum(self.stage_sizes)

    def as_dict(self):
        d = asdict(self)
        d["stage_sizes"] = list(self.stage_sizes)
        return d


# -- reward sources ---------------------------------------------------------
#
# A source turns a scheme into g_val. ``live`` is what the search loop sees
# (possibly noisy); ``true`` is the deterministic value used for rankings.

class PlantedSource:
    def __init__(self, env, stage_sizes=None):
        self.env = env
        self.stage_sizes = tuple(stage_sizes or (env.m,))

    def live(self, scheme, rng):
        return self.env.evaluate(scheme, noisy=True, rng=rng)

    def true(self, scheme):
        return self.env.noiseless(scheme)

    def true_batch(self, bits):
        return self.env.batch_noiseless(bits)


class FunctionSource:
    """Deterministic g_val from a callable (supernet proxy, external evaluator, ...)."""

    def __init__(self, fn, stage_sizes):
        self.fn = fn
        self.stage_sizes = tuple(stage_sizes)

    def live(self, scheme, rng):
        return float(self.fn(scheme))

    def true(self, scheme):
        return float(self.fn(scheme))


def true_reward(source, weights, scheme):
    """Noiseless objective without the curiosity term."""
    return weights.lambda1 * sparsity_reward(scheme) + weights.lambda2 * source.true(scheme)


# -- the loop ---------------------------------------------------------------

@dataclass
class SearchRun:
    records: list[dict]
    best_scheme: ConnectionScheme | None
    best_reward: float
    best_trace: list[float]
    pbar_trace: list[float]
    extracted: ConnectionScheme
    extracted_reward: float | None
    controller: ctl.Controller
    rnd: cur.RndPair

    def summary(self, config=None):
        out = {
            "extracted_scheme": encode(self.extracted),
            "extracted_reward": self.extracted_reward,
            "best_scheme": None if self.best_scheme is None else encode(self.best_scheme),
            "best_reward": self.best_reward if self.best_scheme is not None else None,
            "iterations": len(self.records),
            "pbar_trace": self.pbar_trace,
            "best_trace": self.best_trace,
            "final_probs": ctl.controller_probs(self.controller).tolist(),
        }
        if config is not None:
            out["config"] = config
        return out


class SearchAborted(RuntimeError):
    def __init__(self, message, run, checkpoint):
        super().__init__(message)
        self.run = run
        self.checkpoint = checkpoint


@dataclass
class _State:
    """Everything needed to continue a search after iteration ``t``."""

    t: int
    controller: ctl.Controller
    rnd: cur.RndPair
    buffer: ctl.ReplayBuffer
    rngs: dict
    best_scheme: ConnectionScheme | None = None
    best_reward: float = -math.inf
    best_trace: list = field(default_factory=list)
    pbar_trace: list = field(default_factory=list)


def _fresh_state(cfg):
    streams = np.random.SeedSequence(cfg.seed).spawn(5)
    init_c, init_r, sample, noise, replay = (np.random.default_rng(s) for s in streams)
    controller = ctl.make_controller(
        cfg.stage_sizes, init_c, hidden=cfg.controller_hidden,
        input_dim=cfg.controller_input_dim, lr=cfg.learning_rate, ppo_clip=cfg.ppo_clip,
    )
    rnd = cur.make_rnd(cfg.m, init_r, hidden=cfg.rnd_hidden, embed_dim=cfg.rnd_embed,
                       lr=cfg.rnd_lr, normalize=cfg.rnd_normalize)
    return _State(0, controller, rnd, ctl.ReplayBuffer(cfg.replay_capacity),
                  {"sample": sample, "noise": noise, "replay": replay})


def _finish(state, records, source, weights, score=True):
    extracted = ctl.extract_scheme(state.controller)
    # an aborted run must not touch the (failed) environment again
    reward = true_reward(source, weights, extracted) if score else None
    return SearchRun(
        records, state.best_scheme, state.best_reward, list(state.best_trace),
        list(state.pbar_trace), extracted, reward, state.controller, state.rnd,
    )


def run_search(cfg, source, log_path=None, checkpoint_dir=None, resume_from=None):
    """Run the policy-gradient search against ``source``.

    ``log_path`` receives one JSON line per iteration. If the source fails
    mid-run the log is flushed, a checkpoint is written to
    ``checkpoint_dir`` (when given) and ``SearchAborted`` is raised;
    ``resume_from`` continues from such a checkpoint.
    """
    if tuple(source.stage_sizes) != cfg.stage_sizes:
        raise ValueError(f"source stage sizes {source.stage_sizes} != config {cfg.stage_sizes}")
    w = cfg.weights
    state = load_checkpoint(resume_from, cfg) if resume_from else _fresh_state(cfg)
    records = []
    log_file = open(log_path, "a" if resume_from else "w") if log_path else None
    try:
        for t in range(state.t + 1, cfg.search_steps + 1):
            snapshot = {k: r.bit_generator.state for k, r in state.rngs.items()}
            try:
                rec = _iteration(t, cfg, state, source, w)
            except Exception as exc:
                # rewind the draws of the failed iteration so a resume replays it
                for k, st in snapshot.items():
                    state.rngs[k].bit_generator.state = st
                if log_file:
                    log_file.flush()
                ckpt = save_checkpoint(state, cfg, checkpoint_dir) if checkpoint_dir else None
                run = _finish(state, records, source, w, score=False)
                raise SearchAborted(f"iteration {t}: {exc}", run, ckpt) from exc
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
    finally:
        if log_file:
            log_file.close()
    return _finish(state, records, source, w)


def _iteration(t, cfg, state, source, w):
    c, rnd, rngs = state.controller, state.rnd, state.rngs
    probs, scheme = ctl.sample_scheme(c, rngs["sample"])
    pbar = ctl.convergence_pbar(probs, scheme)
    g_spa = sparsity_reward(scheme)
    g_val = source.live(scheme, rngs["noise"])
    g_rnd = cur.rnd_bonus(rnd, scheme) if w.lambda3 > 0 else 0.0
    reward = combine_reward(w, g_spa, g_val, g_rnd)

    # everything touching the environment is done; from here the step is local
    ctl.reinforce_update(c, scheme, reward.total)
    if w.lambda3 > 0:
        cur.rnd_train(rnd, scheme)
    state.buffer.put(ctl.TrajectoryRecord(probs, scheme, reward.total, t))
    if t >= cfg.ppo_start:
        ctl.ppo_update(c, state.buffer.sample(cfg.replay_sample, rngs["replay"]))

    g_val_true = source.true(scheme)
    true_g = w.lambda1 * g_spa + w.lambda2 * g_val_true
    if true_g > state.best_reward:
        state.best_reward, state.best_scheme = true_g, scheme
    state.best_trace.append(state.best_reward)
    state.pbar_trace.append(pbar)
    state.t = t
    return {
        "iter": t,
        "scheme": encode(scheme),
        "probs": probs.tolist(),
        "g_spa": g_spa,
        "g_val": g_val,
        "g_val_true": g_val_true,
        "g_rnd": g_rnd,
        "G": reward.total,
        "pbar": pbar,
    }


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state, cfg, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nn.save_params(state.controller.net, d / "controller.bin", {"role": "controller"})
    nn.save_params(state.rnd.target, d / "rnd_target.bin", {"role": "rnd_target"})
    nn.save_params(state.rnd.predictor, d / "rnd_predictor.bin", {"role": "rnd_predictor"})
    opt = state.rnd.predictor_optimizer
    if opt.m is not None:
        nn.save_params(opt.m, d / "rnd_adam_m.bin")
        nn.save_params(opt.v, d / "rnd_adam_v.bin")
    meta = {
        "t": state.t,
        "config": cfg.as_dict() | {"weights": cfg.weights.as_dict()},
        "controller_opt_step": state.controller.optimizer.step,
        "rnd_opt_step": opt.step,
        "rnd_running": [state.rnd.count, state.rnd.mean, state.rnd.m2],
        "rngs": {k: r.bit_generator.state for k, r in state.rngs.items()},
        "buffer": [
            {"probs": r.probs_old.tolist(), "scheme": encode(r.scheme), "G": r.reward,
             "iter": r.iteration}
            for r in state.buffer
        ],
        "best_scheme": None if state.best_scheme is None else encode(state.best_scheme),
        "best_reward": state.best_reward if state.best_scheme is not None else None,
        "best_trace": state.best_trace,
        "pbar_trace": state.pbar_trace,
    }
    (d / "state.json").write_text(json.dumps(meta))
    return d


def load_checkpoint(directory, cfg):
    from .scheme import decode

    d = Path(directory)
    meta = json.loads((d / "state.json").read_text())
    state = _fresh_state(cfg)
    state.t = meta["t"]
    state.controller.net = nn.load_params(d / "controller.bin")
    state.controller.optimizer.step = meta["controller_opt_step"]
    state.rnd.target = nn.load_params(d / "rnd_target.bin")
    state.rnd.predictor = nn.load_params(d / "rnd_predictor.bin")
    opt = state.rnd.predictor_optimizer
    opt.step = meta["rnd_opt_step"]
    if (d / "rnd_adam_m.bin").exists():
        opt.m = nn.load_params(d / "rnd_adam_m.bin")
        opt.v = nn.load_params(d / "rnd_adam_v.bin")
    state.rnd.count, state.rnd.mean, state.rnd.m2 = meta["rnd_running"]
    for k, st in meta["rngs"].items():
        state.rngs[k].bit_generator.state = st
    for r in meta["buffer"]:
        state.buffer.put(ctl.TrajectoryRecord(
            np.array(r["probs"]), decode(r["scheme"]), r["G"], r["iter"]))
    if meta["best_scheme"] is not None:
        state.best_scheme = decode(meta["best_scheme"])
        state.best_reward = meta["best_reward"]
    state.best_trace = meta["best_trace"]
    state.pbar_trace = meta["pbar_trace"]
    return state


# -- exhaustive ranking -----------------------------------------------------

@dataclass
class Ranking:
    """Every scheme, best first; ties broken by the lexicographically smaller text."""

    m: int
    stage_sizes: tuple[int, ...]
    codes: np.ndarray
    g_spa: np.ndarray
    g_val: np.ndarray
    total: np.ndarray

    def __len__(self):
        return self.codes.size

    def scheme(self, rank):
        """Scheme at 1-based ``rank``."""
        code = int(self.codes[rank - 1])
        bits = [(code >> (self.m - 1 - i)) & 1 for i in range(self.m)]
        return ConnectionScheme(bits, self.stage_sizes)

    def top(self, k=1):
        return [(self.scheme(r), float(self.total[r - 1])) for r in range(1, k + 1)]

    def best(self):
        return self.top(1)[0]

    def threshold(self, fraction):
        """Reward of the last scheme inside the best ``fraction`` of all schemes."""
        k = max(1, math.ceil(fraction * len(self)))
        return float(self.total[k - 1])

    def in_top(self, reward, fraction):
        return reward >= self.threshold(fraction)

    def write_csv(self, path, limit=None):
        n = len(self) if limit is None else min(limit, len(self))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scheme", "rank", "g_spa", "g_val", "G"])
            for r in range(1, n + 1):
                writer.writerow([encode(self.scheme(r)), r, repr(float(self.g_spa[r - 1])),
                                 repr(float(self.g_val[r - 1])), repr(float(self.total[r - 1]))])


def brute_force(source, weights, m=None, stage_sizes=None, chunk=1 << 18):
    """Score all 2**m schemes on the noiseless objective (curiosity excluded)."""
    if isinstance(source, PlantedEnv):
        source = PlantedSource(source)
    stage_sizes = tuple(stage_sizes or source.stage_sizes)
    m = m if m is not None else sum(stage_sizes)
    if m > MAX_BRUTE_FORCE_M:
        raise ValueError(f"brute force limited to m <= {MAX_BRUTE_FORCE_M}, got {m}")
    if m != sum(stage_sizes):
        raise ValueError(f"m={m} does not match stage sizes {stage_sizes}")
    n = 1 << m
    codes = np.arange(n, dtype=np.int64)
    g_spa = np.empty(n)
    g_val = np.empty(n)
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    for start in range(0, n, chunk):
        block = ((codes[start:start + chunk, None] >> shifts) & 1).astype(np.uint8)
        g_spa[start:start + len(block)] = 1.0 - block.sum(axis=1) / m
        if hasattr(source, "true_batch"):
            g_val[start:start + len(block)] = source.true_batch(block)
        else:
            g_val[start:start + len(block)] = [
                source.true(ConnectionScheme(row, stage_sizes)) for row in block
            ]
    total = weights.lambda1 * g_spa + weights.lambda2 * g_val
    order = np.lexsort((codes, -total))
    return Ranking(m, stage_sizes, codes[order], g_spa[order], g_val[order], total[order])


# -- baselines --------------------------------------------------------------

@dataclass
class BaselineResult:
    best: ConnectionScheme
    best_reward: float
    schemes: list[ConnectionScheme]
    rewards: np.ndarray


def baseline_random(source, weights, n, rng):
    """Score ``n`` Bernoulli(0.5) schemes on the noiseless objective."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(source, PlantedEnv):
        source = PlantedSource(source)
    m = sum(source.stage_sizes)
    schemes = [sample_bernoulli(m, 0.5, rng, source.stage_sizes) for _ in range(n)]
    rewards = np.array([true_reward(source, weights, s) for s in schemes])
    i = int(np.argmax(rewards))
    return BaselineResult(schemes[i], float(rewards[i]), schemes, rewards)


def baseline_hsp(m, period, offset=0, stage_sizes=None):
    """Connect every ``period``-th block starting at block ``offset``."""
    if not 1 <= period <= m:
        raise ValueError(f"period must be in [1, {m}]")
    if not 0 <= offset < period:
        raise ValueError(f"offset must be in [0, {period})")
    return ConnectionScheme([1 if i % period == offset else 0 for i in range(m)], stage_sizes)


# -- proxy fidelity ---------------------------------------------------------

class UndefinedCorrelationError(ValueError):
    pass


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equally long series of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return float(dx @ dy) / math.sqrt(sxx * syy)


@dataclass
class CorrelationResult:
    r: float
    proxy: list[float]
    standalone: list[float]
    schemes: list[str]


def proxy_correlation(net, schemes, data, seeds, scratch=None):
    """Pearson r between supernet proxy accuracy and from-scratch accuracy.

    Stand-alone accuracy is averaged over the training ``seeds``.
    ``scratch(scheme, seed)`` overrides the from-scratch trainer.
    """
    from . import supernet as sn

    if len(schemes) < 3:
        raise ValueError("need at least 3 schemes")
    if scratch is None:
        def scratch(s, seed):
            return sn.scratch_train(net.config, s, data, seed)
    proxy = [sn.proxy_eval(net, s, data) for s in schemes]
    standalone = [float(np.mean([scratch(s, seed) for seed in seeds])) for s in schemes]
    return CorrelationResult(pearson(proxy, standalone), proxy, standalone,
                             [encode(s) for s in schemes])
