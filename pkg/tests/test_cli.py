import csv
import json
import time

import numpy as np
import pytest

from adasplit import cli
from adasplit.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_RUNTIME, load_config, main
from adasplit.exceptions import TrainingFailure
from adasplit.mathcore import RngStream
from adasplit.splitlm import load_lm, perplexity, split_sequences

from conftest import CORPUS, lm_cache_path

TINY_LM = ["lm.n_layers=3", "lm.context=16", "lm.width=16", "lm.n_heads=2", "lm.ff_width=32", "lm.steps=30"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(out, command, *sets, extra=()):
    argv = [command, "--out", str(out), "--set", f"lm.corpus={json.dumps(str(CORPUS))}"]
    for s in sets:
        argv += ["--set", s]
    return main(argv + list(extra))


@pytest.fixture(scope="module")
def lm_checkpoint(trained_lm, corpus_text):
    from adasplit.splitlm import SplitTransformerLM

    path = lm_cache_path(SplitTransformerLM(), corpus_text)
    assert path.exists()
    return f"lm.checkpoint={json.dumps(str(path))}"


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = load_config(None, ["reward.lambda=0.5", "env.case=\"H\"", "agent.ppo.batch=200"])
        assert cfg["reward"]["lambda"] == 0.5
        assert cfg["env"]["case"] == "H"
        assert cfg["agent"]["ppo"]["batch"] == 200
        assert cli.DEFAULT_CONFIG["reward"]["lambda"] == 1.0

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 7, "env": {"u": 2}}))
        cfg = load_config(path)
        assert cfg["seed"] == 7 and cfg["env"]["u"] == 2 and cfg["env"]["case"] == "A"

    def test_unknown_key_exit_code(self, tmp_path):
        assert run(tmp_path, "sweep", "reward.gamma=1") == EXIT_CONFIG
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"nope": 1}))
        assert main(["sweep", "--config", str(path)]) == EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["sweep", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["sweep", "--config", str(tmp_path / "absent.json")]) == EXIT_MISSING

    def test_seed_must_be_integer(self):
        with pytest.raises(cli.ConfigError):
            load_config(None, ['seed="x"'])

    def test_runtime_failure_exit_code(self, tmp_path, monkeypatch):
        def boom(cfg, args):
            raise TrainingFailure("diverged", step=3)

        monkeypatch.setitem(cli.COMMANDS, "sweep", boom)
        assert run(tmp_path, "sweep") == EXIT_RUNTIME


class TestTrainLm:
    def test_missing_corpus(self, tmp_path, capsys):
        code = main(["train-lm", "--out", str(tmp_path), "--set", f"lm.corpus={json.dumps(str(tmp_path / 'x'))}"])
        assert code == EXIT_MISSING
        assert "corpus" in capsys.readouterr().err

    def test_same_seed_identical_checkpoint(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(a, "train-lm", *TINY_LM) == EXIT_OK
        assert run(b, "train-lm", *TINY_LM) == EXIT_OK
        assert (a / "lm.json").read_bytes() == (b / "lm.json").read_bytes()
        manifest = json.loads((a / "train-lm.manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["vocab_size"] == 79
        assert str(CORPUS) in manifest["inputs"]


class TestPipelineCommands:
    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "sweep") == EXIT_MISSING
        assert run(tmp_path, "collect") == EXIT_MISSING
        assert run(tmp_path, "train-agent") == EXIT_MISSING

    def test_missing_records_and_models(self, tmp_path, lm_checkpoint):
        assert run(tmp_path, "fit-surrogate") == EXIT_MISSING
        assert run(tmp_path, "train-agent", lm_checkpoint, extra=["--reward-source", "surrogate"]) == EXIT_MISSING
        assert run(tmp_path, "eval", lm_checkpoint) == EXIT_MISSING
        assert run(tmp_path, "analyze", extra=["--logs", str(tmp_path / "none.csv")]) == EXIT_MISSING
        assert run(tmp_path, "analyze") == EXIT_CONFIG

    def test_invalid_agent_combination(self, tmp_path, lm_checkpoint):
        code = run(tmp_path, "train-agent", lm_checkpoint, extra=["--agent", "dqn", "--reward-source", "algorithm1"])
        assert code == EXIT_CONFIG

    def test_single_point_sweep(self, tmp_path, lm_checkpoint):
        code = run(tmp_path, "sweep", lm_checkpoint, "sweep.p=[2]", "sweep.snr_db=[]", "sweep.sigma=[]")
        assert code == EXIT_OK
        out = rows(tmp_path / "sweep.csv")
        assert len(out) == 1 and out[0]["mode"] == "ideal"

    def test_sweep_table(self, tmp_path, lm_checkpoint, trained_lm):
        assert run(tmp_path, "sweep", lm_checkpoint, "sweep.sigma=[0.0]") == EXIT_OK
        table = rows(tmp_path / "sweep.csv")
        first = (tmp_path / "sweep.csv").read_bytes()
        g = RngStream(0).child("sweep.rows").generator
        pool = trained_lm.pool
        pool = pool[np.sort(g.choice(len(pool), min(32, len(pool)), replace=False))]
        clean = perplexity(trained_lm.params, pool).ppl
        ideal = [r for r in table if r["mode"] == "ideal"]
        assert [int(r["p"]) for r in ideal] == list(range(1, 8))
        for r in ideal:
            assert abs(float(r["ppl"]) - clean) <= 1e-9
        assert len([r for r in table if r["mode"] == "awgn"]) == 14
        for p in range(1, 8):
            by_loss = sorted((float(r["loss"]), float(r["ppl"])) for r in table
                             if r["mode"] == "loss" and int(r["p"]) == p)
            ppls = [v for _, v in by_loss]
            assert all(a <= b for a, b in zip(ppls, ppls[1:])), (p, by_loss)
        # re-running is byte-identical
        assert run(tmp_path, "sweep", lm_checkpoint, "sweep.sigma=[0.0]") == EXIT_OK
        assert (tmp_path / "sweep.csv").read_bytes() == first

    def test_collect_fit_train_eval_analyze(self, tmp_path, lm_checkpoint, capsys):
        sets = [lm_checkpoint, "surrogate.n_records=60", "surrogate.epochs=20", "agent.total_steps=400"]
        assert run(tmp_path, "collect", *sets) == EXIT_OK
        assert len(rows(tmp_path / "records.csv")) == 60
        assert run(tmp_path, "fit-surrogate", *sets) == EXIT_OK
        cv = json.loads((tmp_path / "surrogate.cv.json").read_text())
        assert cv["k"] == 5 and len(cv["fold_mse"]) == 5
        assert run(tmp_path, "train-agent", *sets, extra=["--reward-source", "surrogate"]) == EXIT_OK
        manifest = json.loads((tmp_path / "ppo-surrogate-s0.manifest.json").read_text())
        assert manifest["lm_calls"] == 0
        assert run(tmp_path, "train-agent", *sets, extra=["--agent", "random"]) == EXIT_OK
        assert run(tmp_path, "eval", *sets, extra=["--agent", "random", "--episodes", "500"]) == EXIT_OK
        ev = rows(tmp_path / "random-true-s0.eval.csv")
        assert len(ev) == 500
        assert list(ev[0]) == ["episode", "reward", "p", "sigma", "m", "ppl"]
        code = run(tmp_path, "analyze", *sets, extra=["--logs", str(tmp_path / "random-true-s0.log.csv"),
                                                      "--eval", str(tmp_path / "random-true-s0.eval.csv")])
        assert code == EXIT_OK
        assert (tmp_path / "curves.csv").exists()
        dist = json.loads((tmp_path / "random-true-s0.rewards.json").read_text())
        assert dist["n"] == 500
        trend = json.loads((tmp_path / "random-true-s0.trend.json").read_text())
        assert set(trend) == {"global_slope", "r2"}

    def test_algorithm1_manifest(self, tmp_path, lm_checkpoint):
        sets = [lm_checkpoint, "surrogate.T=1", "surrogate.epochs=30", "agent.total_steps=800"]
        assert run(tmp_path, "train-agent", *sets, extra=["--reward-source", "algorithm1"]) == EXIT_OK
        manifest = json.loads((tmp_path / "ppo-algorithm1-s0.manifest.json").read_text())
        events = manifest["events"]
        if events.get("switch_refused"):
            assert manifest["switch_epoch"] is None
        else:
            assert manifest["switch_epoch"] == 1
            assert events["lm_calls_at_switch"] == events["lm_calls_final"] == 400
        assert "config_hash" in manifest and manifest["versions"]["numpy"] == np.__version__


@pytest.mark.slow
def test_full_pipeline_default_config(tmp_path, trained_lm):
    """Every command on the default configuration, timed end to end."""
    t0 = time.perf_counter()
    timings = {}
    steps = [("train-lm", []), ("sweep", []), ("collect", []), ("fit-surrogate", []),
             ("train-agent", ["--reward-source", "algorithm1"]), ("eval", ["--reward-source", "algorithm1", "--episodes", "500"])]
    for command, extra in steps:
        t = time.perf_counter()
        assert run(tmp_path, command, extra=extra) == EXIT_OK, command
        timings[command] = time.perf_counter() - t
    run_id = "ppo-algorithm1-s0"
    assert run(tmp_path, "analyze", extra=["--logs", str(tmp_path / f"{run_id}.log.csv"),
                                           "--eval", str(tmp_path / f"{run_id}.eval.csv")]) == EXIT_OK
    total = time.perf_counter() - t0
    print(f"pipeline seconds: total {total:.0f}, " + ", ".join(f"{k} {v:.0f}" for k, v in timings.items()))
    # the CLI checkpoint must reproduce the estimator-trained model used by the other tests
    params, _, _ = load_lm(tmp_path / "lm.json")
    for a, b in zip(params.arrays(), trained_lm.params.arrays()):
        np.testing.assert_array_equal(a, b)
    held = split_sequences(trained_lm.tokenizer.encode(trained_lm.held_text), params.config.context + 1)
    assert perplexity(params, held).ppl < 0.5 * params.config.vocab_size
    assert total < 30 * 60
