import numpy as np
import pytest

from adasplit.agents import PpoHyper, collect_rollout, compute_gae, train_agent
from adasplit.agents.training import Agent
from adasplit.agents.updates import prepare_advantages
from adasplit.environment import (
    EnvConfig,
    FunctionOracle,
    LmOracle,
    RewardWeights,
    SplitEnv,
    State,
    reward_surrogate,
    reward_true,
)
from adasplit.exceptions import InvalidDatasetError, InvalidParameterError
from adasplit.mathcore import RngStream
from adasplit.splitlm import LmConfig, perplexity
from adasplit.surrogate import (
    Lattice,
    SurrogateRecord,
    SurrogateRegressor,
    algorithm1_train,
    collect_records,
    default_threshold,
    fit_surrogate,
    kfold_indices,
    paired_runs,
    read_records,
    records_to_array,
    surrogate_predict,
    write_records,
)

CFG8 = LmConfig(vocab_size=79)


def linear(p, sigma, m):
    return 2.0 + 0.5 * p + 3.0 * sigma + 0.2 * m


def smooth(p, sigma, m):
    return 3.0 + 0.3 * (p - 4) ** 2 + 20 * sigma ** 2 + 2.0 / m


def records_from(fn, n=600, seed=0, noise=0.0):
    return collect_records(FunctionOracle(fn, CFG8, noise), "random", n, seed)


def fn_env(fn=smooth, noise=0.05, seed=0):
    return SplitEnv(FunctionOracle(fn, CFG8, noise), "A", EnvConfig(), RewardWeights(1.0), seed)


class TestCollect:
    def test_lattice_cardinality(self):
        cfg = LmConfig(n_layers=32, vocab_size=79)
        plan = Lattice(tuple(range(1, 32)), tuple(np.linspace(0.01, 0.5, 8)), tuple(np.linspace(1.0, 8.0, 8)))
        recs = collect_records(FunctionOracle(smooth, cfg), plan, rng=0)
        assert len(recs) == 31 * 8 * 8 == 1984
        assert len({(r.p, r.sigma, r.m) for r in recs}) == 1984

    def test_lattice_size_mismatch(self):
        plan = Lattice((1, 2), (0.1,), (1.0,))
        with pytest.raises(InvalidParameterError):
            collect_records(FunctionOracle(smooth, CFG8), plan, n=3)

    def test_random_plan_count(self):
        recs = records_from(smooth, n=9718)
        assert len(recs) == 9718
        assert all(1 <= r.p <= 7 and 0.01 <= r.sigma <= 0.5 and r.ppl >= 1 for r in recs)

    def test_ceiling_applied(self):
        recs = records_from(lambda p, s, m: 1e9, n=20)
        assert all(r.ppl == 10 * CFG8.vocab_size for r in recs)

    def test_clean_channel_records_match_clean_ppl(self, trained_lm):
        params = trained_lm.params
        oracle = LmOracle(params, trained_lm.pool, rng=RngStream(0), dtype=np.float64)
        plan = Lattice(tuple(range(1, 8)), (0.0,), (1.0,))
        env_cfg = EnvConfig(sigma_range=(0.0, 0.0), channel_mode="awgn")
        recs = collect_records(oracle, plan, rng=0, env_cfg=env_cfg)
        clean = perplexity(params, trained_lm.pool[oracle.rows]).ppl
        for r in recs:
            assert abs(r.ppl - clean) <= 1e-9

    def test_csv_round_trip(self, tmp_path):
        recs = records_from(smooth, n=30)
        write_records(tmp_path / "d.csv", recs)
        assert read_records(tmp_path / "d.csv") == recs
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "p,sigma,m,ppl"


class TestFit:
    def test_linear_ground_truth(self):
        _, report = fit_surrogate(records_from(linear, n=2000), k=5, rng=0)
        assert report.normalized_mse < 1e-4, report.normalized_mse

    def test_constant_target(self):
        recs = [SurrogateRecord(p, s, 1.0, 7.25) for p in range(1, 8) for s in np.linspace(0.01, 0.5, 10)]
        model, report = fit_surrogate(recs, k=5, rng=0)
        assert report.mean_mse == 0.0
        assert model.predict([[3, 0.2, 1.0], [9, 5.0, 40.0]]).tolist() == [7.25, 7.25]

    def test_folds_balanced_disjoint_covering(self):
        for n in (50, 51, 99, 103):
            folds = kfold_indices(n, 5, RngStream(1))
            sizes = [len(f) for f in folds]
            assert max(sizes) - min(sizes) <= 1
            joined = np.concatenate(folds)
            assert sorted(joined.tolist()) == list(range(n))

    def test_too_few_records(self):
        recs = records_from(smooth, n=49)
        with pytest.raises(InvalidDatasetError):
            fit_surrogate(recs, k=5)
        with pytest.raises(InvalidParameterError):
            fit_surrogate(records_from(smooth, n=60), k=1)

    def test_training_points_within_three_rmse(self):
        recs = records_from(smooth, n=800)
        model, report = fit_surrogate(recs, k=5, rng=0)
        X, y = records_to_array(recs)
        bound = 3 * np.sqrt(report.mean_mse)
        p, sigma, m, ppl = X[0, 0], X[0, 1], X[0, 2], y[0]
        assert abs(surrogate_predict(model, p, sigma, m)[0] - ppl) <= bound
        # a 3-sigma band covers about 99.7% of roughly Gaussian residuals
        err = np.abs(model.predict(X) - y)
        assert np.mean(err <= bound) >= 0.99

    def test_hull_flags(self):
        recs = records_from(smooth, n=200)
        model, _ = fit_surrogate(recs, k=5, rng=0)
        r = recs[0]
        assert surrogate_predict(model, r.p, r.sigma, r.m)[1] is False
        max_sigma = max(x.sigma for x in recs)
        assert surrogate_predict(model, r.p, 100 * max_sigma, r.m)[1] is True

    def test_fixed_seed_identical_report(self):
        recs = records_from(smooth, n=300, noise=0.1)
        _, a = fit_surrogate(recs, k=5, rng=3)
        _, b = fit_surrogate(recs, k=5, rng=3)
        assert a == b

    def test_prediction_deterministic(self):
        model, _ = fit_surrogate(records_from(smooth, n=200), k=5, rng=0)
        assert surrogate_predict(model, 3, 0.2, 2.0) == surrogate_predict(model, 3, 0.2, 2.0)

    def test_checkpoint_round_trip(self, tmp_path):
        model, _ = fit_surrogate(records_from(smooth, n=200), k=5, rng=0)
        model.save(tmp_path / "s.json")
        back = SurrogateRegressor.load(tmp_path / "s.json")
        X = np.array([[1, 0.1, 1.0], [7, 0.5, 30.0]])
        np.testing.assert_array_equal(back.predict(X), model.predict(X))
        assert back.get_params() == model.get_params()

    def test_sklearn_score(self):
        X, y = records_to_array(records_from(smooth, n=400))
        est = SurrogateRegressor(epochs=60).fit(X, y)
        assert est.score(X, y) > 0.95


class TestAlgorithm1:
    def test_default_threshold(self):
        assert default_threshold(PpoHyper()) == 5

    def test_late_threshold_is_plain_ppo(self):
        _, a1, model = algorithm1_train(fn_env(), T=100, total_steps=1200, rng=4)
        _, plain = train_agent("ppo", fn_env(), total_steps=1200, rng=4)
        assert model is None
        assert a1.steps == plain.steps and a1.updates == plain.updates
        assert "switch_epoch" not in a1.events

    def test_lm_calls_frozen_after_switch(self):
        env = fn_env()
        _, log, model = algorithm1_train(env, T=2, total_steps=2000, rng=0)
        ev = log.events
        assert model is not None and ev["switch_epoch"] == 2
        assert ev["switch_step"] == 800
        assert ev["lm_calls_at_switch"] == ev["lm_calls_final"] == env.lm_calls == 800
        assert {row["source"] for row in log.steps[800:]} == {"surrogate"}
        assert {row["source"] for row in log.steps[:800]} == {"true"}

    def test_bad_fit_refuses_switch(self):
        env = fn_env()
        _, log, model = algorithm1_train(env, T=2, total_steps=1200, rng=0, gate=0.0)
        assert model is None and log.events["switch_refused"]
        assert env.lm_calls == 1200

    def test_surrogate_advantages_reuse_gae(self):
        env = fn_env()
        model, _ = fit_surrogate(records_from(smooth, n=300), k=5, rng=0)
        env.set_reward_source("surrogate", model)
        agent = Agent("ppo", 3, RngStream(0))
        hyper = PpoHyper()
        buf = collect_rollout(env, agent, hyper, RngStream(1))
        for rec, r in zip(buf.records, buf.rewards):
            p, sigma, m, _ = rec
            expected, _ = reward_surrogate(State(sigma, m, p), env.weights, model, CFG8)
            assert r == expected
        values, nvalues, dones = np.array(buf.values), np.array(buf.next_values), np.array(buf.dones)
        adv, _ = compute_gae(np.array(buf.rewards), values, nvalues, dones, hyper.gamma, hyper.xi_gae)
        prepare_advantages(buf, hyper.gamma, hyper.xi_gae)
        assert buf.advantages.tobytes() == adv.tobytes()

    def test_variance_reduction(self, trained_lm):
        oracle = LmOracle(trained_lm.params, trained_lm.pool, rng=0)
        model, _ = fit_surrogate(records_from(smooth, n=200), k=5, rng=0)
        s = State(0.3, 0.8, 3)
        w = RewardWeights(1.0)
        true = [reward_true(s, w, oracle, RngStream(5, i))[0] for i in range(20)]
        surr = [reward_surrogate(s, w, model, oracle.config)[0] for _ in range(20)]
        assert len(set(surr)) == 1
        assert np.var(true) > 0.0

    def test_paired_runs_match_separate_runs(self):
        pair = paired_runs(fn_env(), T=2, total_steps=1600, rng=8)
        _, a1, _ = algorithm1_train(fn_env(), T=2, total_steps=1600, rng=8)
        _, plain = train_agent("ppo", fn_env(), total_steps=1600, rng=8)
        assert pair["algorithm1"][1].fingerprint() == a1.fingerprint()
        assert pair["true"][1].fingerprint() == plain.fingerprint()


@pytest.mark.slow
def test_post_switch_steps_are_cheaper(trained_lm):
    env = SplitEnv(LmOracle(trained_lm.params, trained_lm.pool, rng=0), "A", rng=0)
    _, log, model = algorithm1_train(env, T=2, total_steps=1600, rng=0)
    assert model is not None
    k = log.events["switch_step"]
    pre = np.mean(log.step_seconds[:k])
    post = np.mean(log.step_seconds[k:])
    assert post <= 0.1 * pre, (pre, post)
