"""Command-line entry point: ``attnsearch <command> [flags]``.

Every command reads one flat JSON config (``--config``), applies
``EAN_<KEY>`` environment overrides and then command-line flags, and
writes its artifacts plus a ``manifest.json`` into the run directory.

Exit codes: 0 ok, 2 bad config or arguments, 3 transport failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import supernet as sn
from .environment import (
    ExternalEvaluator,
    PlantedEnv,
    ProtocolError,
    RewardWeights,
    TransportError,
    parse_endpoint,
    serve_stream,
    serve_tcp,
)
from .nn import NumericalError
from .scheme import ConnectionScheme, SchemeParseError, decode, encode
from .search import (
    MAX_BRUTE_FORCE_M,
    FunctionSource,
    PlantedSource,
    SearchAborted,
    SearchConfig,
    UndefinedCorrelationError,
    baseline_hsp,
    baseline_random,
    brute_force,
    proxy_correlation,
    run_search,
)

log = logging.getLogger("attnsearch")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    # planted landscape
    "m": 18,
    "planted_interactions": 4,
    "planted_noise": 0.01,
    # None selects the generator's own rule (see PlantedEnv.generate)
    "planted_base": None,
    "planted_utility_scale": None,
    "planted_interaction_scale": None,
    "planted_ceiling": 0.95,
    # supernet and toy data
    "stage_sizes": [6, 6, 6],
    "stage_widths": [16, 32, 64],
    "block_hidden": 4,
    "attn_bottleneck": 8,
    "sharing_mode": "share_full",
    "input_dim": 16,
    "n_classes": 8,
    "n_train": 4096,
    "n_val": 1024,
    "n_test": 1024,
    "clusters_per_class": 4,
    "spread": 0.8,
    "batch_size": 64,
    "supernet_lr": 1e-3,
    "pretrain_steps": 2000,
    "scratch_steps": 1000,
    "checkpoint": None,
    # search
    "env": "planted",
    "search_steps": None,
    "ppo_start": None,
    "learning_rate": 0.005,
    "lambda1": 0.5,
    "lambda2": 1.0,
    "lambda3": 0.1,
    "replay_capacity": 64,
    "replay_sample": 8,
    "controller_hidden": 64,
    "rnd_normalize": False,
    "ppo_clip": None,
    # external evaluator
    "timeout": 30.0,
    "retries": 2,
    # baselines, bench, correlate
    "draws": 180,
    "period": 2,
    "offset": 0,
    "scheme": None,
    "batch": 50,
    "reps": 1000,
    "runs": 7,
    "correlate_schemes": 20,
    "correlate_seeds": [0, 1],
    "endpoint": "stdio",
}

# (T, h) when the config leaves them unset
SEARCH_BUDGETS = {"planted": (2000, 200), "supernet": (300, 50), "external": (300, 50)}


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key]
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ValueError("expected a list")
            return value
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {key!r}: cannot use {value!r} ({exc})") from None


def load_config(path, overrides=None, environ=None):
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        for k, v in doc.items():
            cfg[k] = _coerce(k, v)
    environ = os.environ if environ is None else environ
    for k in DEFAULTS:
        env_key = "EAN_" + k.upper()
        if env_key in environ:
            raw = environ[env_key]
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            cfg[k] = _coerce(k, value)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def _supernet_config(cfg):
    try:
        return sn.SupernetConfig(
            stage_sizes=tuple(cfg["stage_sizes"]), stage_widths=tuple(cfg["stage_widths"]),
            block_hidden=cfg["block_hidden"], attn_bottleneck=cfg["attn_bottleneck"],
            sharing_mode=cfg["sharing_mode"], input_dim=cfg["input_dim"],
            n_classes=cfg["n_classes"], data_seed=cfg["seed"], batch_size=cfg["batch_size"],
            learning_rate=cfg["supernet_lr"], pretrain_steps=cfg["pretrain_steps"],
            scratch_steps=cfg["scratch_steps"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"supernet config: {exc}") from None


def _dataset(cfg):
    return sn.make_dataset(
        cfg["seed"], cfg["input_dim"], cfg["n_classes"], cfg["n_train"], cfg["n_val"],
        cfg["n_test"], cfg["clusters_per_class"], cfg["spread"],
    )


def _weights(cfg):
    try:
        return RewardWeights(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"])
    except ValueError as exc:
        raise ConfigError(f"lambda1..lambda3: {exc}") from None


def _planted(cfg):
    if cfg["m"] < 1:
        raise ConfigError("config field 'm' must be >= 1")
    return PlantedEnv.generate(
        m=cfg["m"], seed=cfg["seed"], n_interactions=cfg["planted_interactions"],
        noise_std=cfg["planted_noise"], base=cfg["planted_base"],
        utility_scale=cfg["planted_utility_scale"],
        interaction_scale=cfg["planted_interaction_scale"],
        ceiling=cfg["planted_ceiling"],
    )


def _load_pretrained(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("config field 'checkpoint' must point at a pretrain run directory")
    d = Path(cfg["checkpoint"])
    if (d / "supernet").is_dir():
        d = d / "supernet"
    if not (d / "supernet.json").is_file():
        raise ConfigError(f"no supernet checkpoint in {cfg['checkpoint']}")
    return sn.load_supernet(d)


class Run:
    """A run directory with its manifest, written once when the command ends."""

    def __init__(self, command, args, cfg):
        stamp = dt.datetime.now(dt.timezone.utc)
        out = args.out or f"runs/{command}-{stamp.strftime('%Y%m%dT%H%M%S%f')}"
        self.dir = Path(out)
        if (self.dir / "manifest.json").exists():
            raise ConfigError(f"{self.dir} already holds a run manifest")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_path = args.config
        self.cfg = cfg
        self.started = stamp.isoformat()
        self.artifacts = {}

    def path(self, name):
        p = self.dir / name
        self.artifacts[name] = str(p)
        return p

    def write_json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, status, extra=None):
        manifest = {
            "command": self.command,
            "config_path": self.config_path,
            "config": self.cfg,
            "seed": self.cfg["seed"],
            "started": self.started,
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
            "status": status,
            "artifacts": self.artifacts,
            "version": __version__,
        }
        manifest.update(extra or {})
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# -- commands ---------------------------------------------------------------

def cmd_pretrain(args, cfg, run):
    config = _supernet_config(cfg)
    data = _dataset(cfg)
    rng = np.random.default_rng(cfg["seed"])
    net = sn.build_supernet(config, rng)
    losses = sn.pretrain(net, data, config.pretrain_steps, rng)
    digest = sn.save_supernet(net, run.path("supernet"))
    with open(run.path("pretrain_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i + 1, repr(float(v))) for i, v in enumerate(losses))
    run.write_json("pretrain.json", {"checkpoint_sha256": digest, "steps": config.pretrain_steps,
                                     "final_loss": float(losses[-1])})
    return {"checkpoint_sha256": digest}


def _search_source(cfg, env):
    if env == "planted":
        planted = _planted(cfg)
        return PlantedSource(planted), None
    if env == "supernet":
        net = _load_pretrained(cfg)
        data = _dataset(cfg)
        return FunctionSource(lambda s: sn.proxy_eval(net, s, data), net.config.stage_sizes), None
    if env.startswith("external:"):
        endpoint = env[len("external:"):]
        try:
            parse_endpoint(endpoint)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ev = ExternalEvaluator(endpoint, cfg["timeout"], cfg["retries"]).connect()
        return FunctionSource(ev.evaluate, tuple(cfg["stage_sizes"])), ev
    raise ConfigError(f"unknown env {env!r}; expected planted, supernet or external:<endpoint>")


def cmd_search(args, cfg, run):
    env = cfg["env"]
    kind = "external" if env.startswith("external:") else env
    if kind not in SEARCH_BUDGETS:
        raise ConfigError(f"unknown env {env!r}; expected planted, supernet or external:<endpoint>")
    steps, start = SEARCH_BUDGETS[kind]
    stage_sizes = (cfg["m"],) if kind == "planted" else tuple(cfg["stage_sizes"])
    try:
        scfg = SearchConfig(
            search_steps=cfg["search_steps"] if cfg["search_steps"] is not None else steps,
            ppo_start=cfg["ppo_start"] if cfg["ppo_start"] is not None else start,
            learning_rate=cfg["learning_rate"], weights=_weights(cfg),
            replay_capacity=cfg["replay_capacity"], replay_sample=cfg["replay_sample"],
            seed=cfg["seed"], stage_sizes=stage_sizes,
            controller_hidden=cfg["controller_hidden"], rnd_normalize=cfg["rnd_normalize"],
            ppo_clip=cfg["ppo_clip"],
        )
    except ValueError as exc:
        raise ConfigError(f"search config: {exc}") from None
    source, evaluator = _search_source(cfg, env)
    try:
        result = run_search(scfg, source, log_path=run.path("run.jsonl"),
                            checkpoint_dir=run.dir / "resume")
    finally:
        if evaluator is not None:
            evaluator.close()
    summary = result.summary(config=cfg)
    summary["weights"] = scfg.weights.as_dict()
    run.write_json("summary.json", summary)
    with open(run.path("curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "G", "pbar", "best"])
        for rec, best in zip(result.records, result.best_trace):
            w.writerow([rec["iter"], repr(rec["G"]), repr(rec["pbar"]), repr(best)])
    print(summary["extracted_scheme"])
    return {}


def cmd_bruteforce(args, cfg, run):
    if cfg["m"] > MAX_BRUTE_FORCE_M:
        raise ConfigError(f"--m {cfg['m']} exceeds the enumeration bound {MAX_BRUTE_FORCE_M}")
    ranking = brute_force(_planted(cfg), _weights(cfg))
    ranking.write_csv(run.path("ranking.csv"))
    best, reward = ranking.best()
    print(encode(best), reward)
    return {}


def cmd_baseline(args, cfg, run):
    stage_sizes = None
    if args.kind == "hsp":
        try:
            scheme = baseline_hsp(cfg["m"], cfg["period"], cfg["offset"], stage_sizes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        run.write_json("baseline.json", {"kind": "hsp", "scheme": encode(scheme),
                                         "period": cfg["period"], "offset": cfg["offset"]})
        print(encode(scheme))
        return {}
    if cfg["draws"] < 1:
        raise ConfigError("config field 'draws' must be >= 1")
    result = baseline_random(_planted(cfg), _weights(cfg), cfg["draws"],
                             np.random.default_rng(cfg["seed"]))
    with open(run.path("distribution.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "G"])
        w.writerows((encode(s), repr(float(g))) for s, g in zip(result.schemes, result.rewards))
    run.write_json("baseline.json", {
        "kind": "random", "draws": cfg["draws"], "best_scheme": encode(result.best),
        "best_reward": result.best_reward, "mean": float(np.mean(result.rewards)),
        "std": float(np.std(result.rewards, ddof=1)) if cfg["draws"] > 1 else 0.0,
    })
    print(encode(result.best), result.best_reward)
    return {}


def cmd_bench(args, cfg, run):
    config = _supernet_config(cfg)
    if cfg["scheme"]:
        try:
            scheme = decode(cfg["scheme"])
        except SchemeParseError as exc:
            raise ConfigError(f"config field 'scheme': {exc}") from None
    else:
        scheme = ConnectionScheme.zeros(config.m, config.stage_sizes)
    if scheme.m != config.m:
        raise ConfigError(f"scheme has {scheme.m} bits, supernet has {config.m} blocks")
    pct = sn.time_increment(config, scheme, cfg["batch"], cfg["reps"], cfg["runs"],
                            seed=cfg["seed"])
    run.write_json("bench.json", {"scheme": encode(scheme), "increment_pct": pct,
                                  "batch": cfg["batch"], "reps": cfg["reps"]})
    print(f"{encode(scheme)} {pct:+.2f}%")
    return {}


def cmd_correlate(args, cfg, run):
    if cfg["checkpoint"]:
        net = _load_pretrained(cfg)
    else:
        rng = np.random.default_rng(cfg["seed"])
        net = sn.build_supernet(_supernet_config(cfg), rng)
        sn.pretrain(net, _dataset(cfg), net.config.pretrain_steps, rng)
    data = _dataset(cfg)
    rng = np.random.default_rng([cfg["seed"], 1])
    schemes = sn.random_density_schemes(net.config, cfg["correlate_schemes"], rng)
    try:
        result = proxy_correlation(net, schemes, data, cfg["correlate_seeds"])
    except UndefinedCorrelationError as exc:
        raise NumericalError(str(exc)) from None
    run.write_json("correlation.json", dataclasses.asdict(result))
    print(f"r = {result.r:.4f}")
    return {}


def cmd_serve(args, cfg, run):
    net = _load_pretrained(cfg)
    data = _dataset(cfg)

    def handler(scheme):
        return sn.proxy_eval(net, scheme, data)

    endpoint = cfg["endpoint"]
    if endpoint == "stdio":
        serve_stream(handler)
        return {}
    transport, (host, port) = parse_endpoint(endpoint)
    if transport != "tcp":
        raise ConfigError("serve endpoint must be 'stdio' or tcp://host:port")
    server = serve_tcp(handler, host, port)
    print(f"listening on tcp://{server.server_address[0]}:{server.server_address[1]}",
          file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return {}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "bruteforce": cmd_bruteforce,
    "baseline": cmd_baseline,
    "bench": cmd_bench,
    "correlate": cmd_correlate,
    "serve": cmd_serve,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="attnsearch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "search":
            p.add_argument("--env", help="planted | supernet | external:<endpoint>")
        if name in ("bruteforce", "baseline", "search"):
            p.add_argument("--m", type=int)
        if name == "baseline":
            p.add_argument("kind", choices=["random", "hsp"])
            p.add_argument("--period", type=int)
            p.add_argument("--offset", type=int)
            p.add_argument("--draws", type=int)
        if name == "bench":
            p.add_argument("--batch", type=int)
            p.add_argument("--reps", type=int)
            p.add_argument("--scheme")
        if name == "serve":
            p.add_argument("--endpoint", help="stdio (default) or tcp://host:port")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k, None)
                 for k in ("seed", "env", "m", "period", "offset", "draws", "batch", "reps",
                           "scheme", "endpoint")}
    run = None
    try:
        cfg = load_config(args.config, overrides)
        run = Run(args.command, args, cfg)
        extra = COMMANDS[args.command](args, cfg, run)
        run.finish("ok", extra)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code, status = EXIT_CONFIG, "config_error"
    except SearchAborted as exc:
        print(f"search aborted: {exc}; resumable checkpoint in {exc.checkpoint}", file=sys.stderr)
        cause = exc.__cause__
        code = EXIT_NUMERIC if isinstance(cause, (NumericalError, FloatingPointError)) \
            else EXIT_TRANSPORT
        status = "aborted"
    except (TransportError, ProtocolError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        code, status = EXIT_TRANSPORT, "transport_error"
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code, status = EXIT_NUMERIC, "numeric_error"
    if run is not None:
        run.finish(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
