"""``adasplit`` command line: train the toy LM, sweep it, collect surrogate
data, train and evaluate agents, and summarize runs.

Exit codes: 0 success, 2 missing input, 3 invalid config, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agents import Agent, PpoHyper, RunLog, config_hash, evaluate_policy, train_agent
from .analysis import aggregate_curves, curves_to_rows, loess, reward_distribution, write_json, write_rows
from .channel import ChannelParams, calibrate_m, snr_to_sigma
from .environment import EnvConfig, LmOracle, RewardWeights, SplitEnv, get_case
from .exceptions import InvalidDatasetError, InvalidParameterError, TrainingFailure
from .mathcore import RngStream
from .splitlm import SplitEvaluator, SplitTransformerLM, load_lm
from .surrogate import SurrogateRegressor, algorithm1_train, collect_records, fit_surrogate, read_records, \
    write_records

log = logging.getLogger("adasplit")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs",
    "lm": {
        "corpus": "data/corpus.txt",
        "checkpoint": None,
        "heldout_frac": 0.1,
        "n_layers": 8, "context": 64, "width": 64, "n_heads": 4, "ff_width": 256,
        "steps": 2000, "lr": 3e-3, "batch_size": 16,
    },
    "channel": {"omega": 1.0, "h_th": 0.5, "sigma_range": [0.01, 0.5]},
    "env": {"case": "A", "steps_per_episode": 5, "u": 1, "n_sequences": 8, "n_trials": 2,
            "dynamics": "iid", "walk_frac": 0.1, "ppl_clamp_factor": 10.0, "channel_mode": "nakagami"},
    "reward": {"lambda": 1.0, "cost_normalizer": "unit-interval"},
    "agent": {"kind": "ppo", "reward_source": "true", "total_steps": 24000, "run_id": None,
              "ppo": PpoHyper().to_dict()},
    "surrogate": {"T": None, "gate": 0.25, "k": 5, "n_records": 2000, "records": None, "model": None,
                  "epochs": 150, "batch_size": 64, "lr": 0.01},
    "sweep": {"p": None, "snr_db": [30.0, 10.0], "sigma": [0.0, 0.1], "loss": [0.05, 0.1, 0.2, 0.3],
              "n_sequences": 32, "n_trials": 4},
    "eval": {"episodes": 500, "agent": None, "mode": "greedy"},
    "analyze": {"logs": [], "eval": [], "window": 10, "frac": 0.3},
}


class MissingInput(Exception):
    pass


class ConfigError(Exception):
    pass


# -- configuration -------------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict) and key != "ppo":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Set one ``dot.key=value`` pair; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(text)


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        _merge(cfg, doc)
    for item in overrides:
        apply_override(cfg, item)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    return cfg


def env_config(cfg: dict) -> EnvConfig:
    e, c = cfg["env"], cfg["channel"]
    return EnvConfig(sigma_range=tuple(c["sigma_range"]), omega=c["omega"], h_th=c["h_th"],
                     dynamics=e["dynamics"], walk_frac=e["walk_frac"], steps_per_episode=e["steps_per_episode"],
                     u=e["u"], n_sequences=e["n_sequences"], n_trials=e["n_trials"],
                     ppl_clamp_factor=e["ppl_clamp_factor"], channel_mode=e["channel_mode"])


def ppo_hyper(cfg: dict) -> PpoHyper:
    d = dict(cfg["agent"]["ppo"])
    d["steps_per_episode"] = cfg["env"]["steps_per_episode"]
    try:
        return PpoHyper.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"bad agent.ppo entry: {exc}") from exc


def out_path(cfg: dict, name: str) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _path(cfg: dict, section: str, key: str, default_name: str) -> Path:
    value = cfg[section][key]
    return Path(value) if value else out_path(cfg, default_name)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: dict, name: str, command: str, inputs=(), outputs=(), **extra) -> Path:
    """Run manifest: inputs with hashes, config hash, versions, seed.

    ``created`` is the only field that changes between identical runs.
    """
    import scipy
    import sklearn

    doc = {
        "command": command,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "versions": {"adasplit": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    path = out_path(cfg, f"{name}.manifest.json")
    write_json(path, doc)
    return path


# -- shared loaders -------------------------------------------------------------------

def read_corpus(cfg: dict) -> str:
    path = _require(Path(cfg["lm"]["corpus"]), "corpus")
    return path.read_text(encoding="utf-8")


def split_corpus(text: str, heldout_frac: float) -> tuple:
    if not 0 < heldout_frac < 1:
        raise ConfigError(f"lm.heldout_frac must be in (0, 1), got {heldout_frac}")
    n = int(len(text) * (1 - heldout_frac))
    return text[:n], text[n:]


def checkpoint_path(cfg: dict) -> Path:
    return _path(cfg, "lm", "checkpoint", "lm.json")


def load_model(cfg: dict):
    """Returns ``(params, tokenizer, held-out sequences)``."""
    params, tokenizer, _ = load_lm(_require(checkpoint_path(cfg), "LM checkpoint"))
    _, held = split_corpus(read_corpus(cfg), cfg["lm"]["heldout_frac"])
    from .splitlm import split_sequences

    pool = split_sequences(tokenizer.encode(held), params.config.context + 1)
    if len(pool) == 0:
        raise InvalidDatasetError("held-out text is shorter than one context window")
    return params, tokenizer, pool


def build_env(cfg: dict, params, pool, rng_name: str = "env") -> SplitEnv:
    ec = env_config(cfg)
    root = RngStream(cfg["seed"])
    oracle = LmOracle(params, pool, ec.n_sequences, ec.n_trials, rng=root.child("oracle"))
    weights = RewardWeights(cfg["reward"]["lambda"], cfg["reward"]["cost_normalizer"])
    return SplitEnv(oracle, get_case(cfg["env"]["case"]), ec, weights, root.child(rng_name))


def run_id_for(cfg: dict) -> str:
    a = cfg["agent"]
    return a["run_id"] or f"{a['kind']}-{a['reward_source']}-s{cfg['seed']}"


# -- commands ----------------------------------------------------------------------------

def cmd_train_lm(cfg: dict, args) -> int:
    text = read_corpus(cfg)
    train, held = split_corpus(text, cfg["lm"]["heldout_frac"])
    lm = cfg["lm"]
    est = SplitTransformerLM(lm["n_layers"], lm["context"], lm["width"], lm["n_heads"], lm["ff_width"],
                             lm["steps"], lm["lr"], lm["batch_size"], cfg["seed"])
    t0 = time.perf_counter()
    est.fit(train)
    seconds = time.perf_counter() - t0
    ppl = est.perplexity(held).ppl
    path = checkpoint_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    est.save(path)
    write_manifest(cfg, "train-lm", "train-lm", [lm["corpus"]], [path], clean_ppl=ppl,
                   vocab_size=est.config_.vocab_size, train_seconds=round(seconds, 1))
    print(f"clean held-out perplexity {ppl:.4f} (vocab {est.config_.vocab_size}); checkpoint {path}")
    return EXIT_OK


def sweep_rows(evaluator: SplitEvaluator, params, scfg: dict, env_cfg: EnvConfig, seed: int) -> list:
    """PPL versus split point in AWGN-SNR mode and packet-loss mode."""
    L = params.config.n_layers
    ps = scfg["p"] or list(range(1, L))
    if isinstance(ps, int):
        ps = [ps]
    root = RngStream(seed).child("sweep")
    n_trials = scfg["n_trials"]
    rows = []
    for p in ps:
        rms = float(np.sqrt(np.mean(evaluator.intermediate(p) ** 2)))
        ideal = evaluator.perplexity(p, ChannelParams.ideal(), root.child("ideal", p), None, 1)
        rows.append({"mode": "ideal", "p": p, "sigma": 0.0, "m": "", "loss": 0.0, "snr_db": "",
                     "ppl": ideal.ppl, "stderr": ideal.stderr})
        for snr in scfg["snr_db"]:
            sigma = snr_to_sigma(snr, rms)
            res = evaluator.perplexity(p, ChannelParams("awgn", sigma=sigma), root.child("awgn", p, snr),
                                       None, n_trials)
            rows.append({"mode": "awgn", "p": p, "sigma": sigma, "m": "", "loss": 0.0, "snr_db": snr,
                         "ppl": res.ppl, "stderr": res.stderr})
        for sigma in scfg["sigma"]:
            for loss in scfg["loss"]:
                m = calibrate_m(loss, env_cfg.omega, env_cfg.h_th)
                ch = ChannelParams("nakagami", m, env_cfg.omega, sigma, env_cfg.h_th)
                res = evaluator.perplexity(p, ch, root.child("loss", p, sigma, loss), None, n_trials)
                rows.append({"mode": "loss", "p": p, "sigma": sigma, "m": m, "loss": loss, "snr_db": "",
                             "ppl": res.ppl, "stderr": res.stderr})
    return rows


def cmd_sweep(cfg: dict, args) -> int:
    params, _, pool = load_model(cfg)
    scfg = cfg["sweep"]
    g = RngStream(cfg["seed"]).child("sweep.rows").generator
    n = min(scfg["n_sequences"], len(pool))
    pool = pool[np.sort(g.choice(len(pool), n, replace=False))]
    rows = sweep_rows(SplitEvaluator(params, pool), params, scfg, env_config(cfg), cfg["seed"])
    path = out_path(cfg, "sweep.csv")
    write_rows(path, rows)
    write_manifest(cfg, "sweep", "sweep", [checkpoint_path(cfg)], [path])
    print(f"{len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_collect(cfg: dict, args) -> int:
    params, _, pool = load_model(cfg)
    env = build_env(cfg, params, pool)
    n = cfg["surrogate"]["n_records"]
    records = collect_records(env.oracle, "random", n, RngStream(cfg["seed"]).child("collect"), env.env_cfg,
                              env.case)
    path = _path(cfg, "surrogate", "records", "records.csv")
    write_records(path, records)
    write_manifest(cfg, "collect", "collect", [checkpoint_path(cfg)], [path], n_records=len(records))
    print(f"{len(records)} records -> {path}")
    return EXIT_OK


def _estimator_params(cfg: dict) -> dict:
    s = cfg["surrogate"]
    return {"epochs": s["epochs"], "batch_size": s["batch_size"], "lr": s["lr"]}


def cmd_fit_surrogate(cfg: dict, args) -> int:
    rec_path = _require(_path(cfg, "surrogate", "records", "records.csv"), "surrogate records")
    records = read_records(rec_path)
    model, report = fit_surrogate(records, cfg["surrogate"]["k"], RngStream(cfg["seed"]).child("surrogate"),
                                  **_estimator_params(cfg))
    path = _path(cfg, "surrogate", "model", "surrogate.json")
    model.save(path)
    cv_path = out_path(cfg, "surrogate.cv.json")
    write_json(cv_path, report.to_dict())
    gate_ok = report.normalized_mse <= cfg["surrogate"]["gate"]
    write_manifest(cfg, "fit-surrogate", "fit-surrogate", [rec_path], [path, cv_path],
                   normalized_mse=report.normalized_mse, gate_passed=gate_ok)
    print(f"k={report.k} CV normalized MSE {report.normalized_mse:.4f} (gate {'passed' if gate_ok else 'failed'})")
    return EXIT_OK


def _apply_agent_flags(cfg: dict, args) -> None:
    if args.agent:
        cfg["agent"]["kind"] = args.agent
    if args.reward_source:
        cfg["agent"]["reward_source"] = args.reward_source


def cmd_train_agent(cfg: dict, args) -> int:
    _apply_agent_flags(cfg, args)
    a = cfg["agent"]
    if a["kind"] not in ("ppo", "a2c", "dqn", "random"):
        raise ConfigError(f"unknown agent kind {a['kind']!r}")
    if a["reward_source"] not in ("true", "surrogate", "algorithm1"):
        raise ConfigError(f"unknown reward source {a['reward_source']!r}")
    if a["reward_source"] == "algorithm1" and a["kind"] != "ppo":
        raise ConfigError("the algorithm1 reward source trains PPO only")
    params, _, pool = load_model(cfg)
    env = build_env(cfg, params, pool)
    hyper = ppo_hyper(cfg)
    run_id = run_id_for(cfg)
    inputs = [checkpoint_path(cfg)]
    rng = RngStream(cfg["seed"]).child("agent")
    extra = {}
    if a["reward_source"] == "surrogate":
        spath = _require(_path(cfg, "surrogate", "model", "surrogate.json"), "surrogate model")
        inputs.append(spath)
        env.set_reward_source("surrogate", SurrogateRegressor.load(spath))
    if a["reward_source"] == "algorithm1":
        s = cfg["surrogate"]
        agent, run_log, model = algorithm1_train(env, hyper, s["T"], a["total_steps"], rng, s["gate"], s["k"],
                                                 run_id, cfg, **_estimator_params(cfg))
        if model is not None:
            model.save(out_path(cfg, f"{run_id}.surrogate.json"))
        extra["switch_epoch"] = run_log.events.get("switch_epoch")
        extra["events"] = run_log.events
    else:
        agent, run_log = train_agent(a["kind"], env, hyper, a["total_steps"], rng, run_id=run_id, config=cfg)
    agent_path = out_path(cfg, f"{run_id}.agent.json")
    log_path = out_path(cfg, f"{run_id}.log.csv")
    agent.save(agent_path, {"run_id": run_id, "config_hash": config_hash(cfg)})
    run_log.to_csv(log_path)
    steps = np.asarray(run_log.step_seconds)
    extra["mean_step_seconds"] = float(steps.mean()) if steps.size else None
    extra["lm_calls"] = env.lm_calls
    write_manifest(cfg, run_id, "train-agent", inputs, [agent_path, log_path], run_id=run_id, **extra)
    tail = run_log.rewards()[-hyper.n_step:]
    print(f"{run_id}: {len(run_log.steps)} steps, final-round mean reward {tail.mean():.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    _apply_agent_flags(cfg, args)
    run_id = run_id_for(cfg)
    agent_path = _require(Path(cfg["eval"]["agent"]) if cfg["eval"]["agent"]
                          else out_path(cfg, f"{run_id}.agent.json"), "agent checkpoint")
    n = args.episodes if args.episodes is not None else cfg["eval"]["episodes"]
    if n < 1:
        raise ConfigError("episodes must be >= 1")
    params, _, pool = load_model(cfg)
    env = build_env(cfg, params, pool, "eval-env")
    agent = Agent.load(agent_path)
    if agent.n_actions != env.n_actions:
        raise ConfigError(f"agent has {agent.n_actions} actions, environment {env.n_actions}")
    mode = cfg["eval"]["mode"] if agent.kind != "random" else "sample"
    res = evaluate_policy(agent, env, n, RngStream(cfg["seed"]).child("eval"), mode)
    rows = [{"episode": i, "reward": float(r), "p": s.p, "sigma": s.sigma, "m": s.m, "ppl": float(q)}
            for i, (r, s, q) in enumerate(zip(res.episode_rewards, res.final_states, res.final_ppl))]
    path = out_path(cfg, f"{run_id}.eval.csv")
    write_rows(path, rows)
    write_manifest(cfg, f"{run_id}.eval", "eval", [agent_path, checkpoint_path(cfg)], [path], episodes=n,
                   median_reward=float(np.median(res.episode_rewards)))
    print(f"{run_id}: {n} episodes, median reward {np.median(res.episode_rewards):.4f} -> {path}")
    return EXIT_OK


def _read_csv_columns(path: Path) -> dict:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidDatasetError(f"{path} has no rows")
    return {k: [r[k] for r in rows] for k in rows[0]}


def cmd_analyze(cfg: dict, args) -> int:
    acfg = cfg["analyze"]
    logs = list(args.logs or acfg["logs"])
    evals = list(args.eval or acfg["eval"])
    if not logs and not evals:
        raise ConfigError("nothing to analyze: pass --logs and/or --eval")
    outputs = []
    groups = {}
    for p in logs:
        path = _require(Path(p), "run log")
        run_log = RunLog.from_csv(path)
        name = path.name.split(".")[0].rsplit("-s", 1)[0]
        groups.setdefault(name, []).append(run_log)
    if groups:
        curves = aggregate_curves(groups, acfg["window"])
        out = out_path(cfg, "curves.csv")
        write_rows(out, curves_to_rows(curves))
        outputs.append(out)
    for p in evals:
        path = _require(Path(p), "evaluation CSV")
        cols = _read_csv_columns(path)
        stem = path.name[: -len(".eval.csv")] if path.name.endswith(".eval.csv") else path.stem
        dist = reward_distribution(np.array(cols["reward"], dtype=float))
        out = out_path(cfg, f"{stem}.rewards.json")
        write_json(out, dist)
        outputs.append(out)
        sigma = np.array(cols["sigma"], dtype=float)
        split = np.array(cols["p"], dtype=float)
        if len(sigma) >= 5:
            fit = loess(sigma, split, acfg["frac"])
            out = out_path(cfg, f"{stem}.splitpoint.csv")
            order = np.argsort(sigma, kind="stable")
            write_rows(out, [{"sigma": float(sigma[i]), "p": int(split[i])} for i in order])
            trend = out_path(cfg, f"{stem}.trend.csv")
            write_rows(trend, fit.to_rows())
            write_json(out_path(cfg, f"{stem}.trend.json"), {"global_slope": fit.global_slope, "r2": fit.r2})
            outputs += [out, trend]
            print(f"{stem}: median reward {dist['median']:.4f}, LOESS slope {fit.global_slope:.4f}, "
                  f"R^2 {fit.r2:.4f}")
    write_manifest(cfg, "analyze", "analyze", logs + evals, outputs)
    return EXIT_OK


COMMANDS = {
    "train-lm": cmd_train_lm,
    "sweep": cmd_sweep,
    "collect": cmd_collect,
    "fit-surrogate": cmd_fit_surrogate,
    "train-agent": cmd_train_agent,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adasplit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-key override, e.g. reward.lambda=0.5")
    common.add_argument("--seed", type=int, help="root seed (same as --set seed=N)")
    common.add_argument("--out", help="output directory (same as --set out_dir=DIR)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-agent", "eval"):
            sp.add_argument("--agent", choices=("ppo", "a2c", "dqn", "random"))
            sp.add_argument("--reward-source", choices=("true", "surrogate", "algorithm1"))
        if name == "eval":
            sp.add_argument("--episodes", type=int)
        if name == "analyze":
            sp.add_argument("--logs", nargs="*", help="run log CSVs")
            sp.add_argument("--eval", nargs="*", help="evaluation CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, InvalidParameterError, InvalidDatasetError, KeyError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingFailure, ArithmeticError, RuntimeError) as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
