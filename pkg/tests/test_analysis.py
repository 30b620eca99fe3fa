import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasplit.agents import PpoHyper, RunLog, train_agent
from adasplit.analysis import (
    HYPER_GRID,
    action_space_sweep,
    aggregate_curves,
    curves_to_rows,
    hyperparameter_sweep,
    loess,
    mann_kendall,
    moving_average,
    reward_distribution,
    sign_test,
    splitpoint_scatter,
    write_json,
    write_rows,
)
from adasplit.environment import EnvConfig, FunctionOracle, RewardWeights, SplitEnv
from adasplit.exceptions import InvalidParameterError
from adasplit.mathcore import RngStream
from adasplit.splitlm import LmConfig

CFG8 = LmConfig(vocab_size=79)


def env_for(seed=0, u=1):
    return SplitEnv(FunctionOracle(lambda p, s, m: 2.0 + abs(p - 4) + s, CFG8, 0.1), "A", EnvConfig(u=u),
                    RewardWeights(1.0), seed)


class FixedSplitAgent:
    """Walks to split ``k`` and stays there whatever the channel does."""

    def __init__(self, k, n_layers=8, u=1):
        self.k, self.n_layers, self.u = k, n_layers, u

    def act(self, obs, rng=None, mode="greedy"):
        p = round(float(obs[0][2] if np.ndim(obs) == 2 else obs[2]) * (self.n_layers - 1))
        return self.u + int(np.sign(self.k - p)), 0.0


class TestLoess:
    @pytest.mark.parametrize("frac", [0.1, 0.3, 0.7, 1.0])
    def test_line_is_reproduced(self, frac):
        x = np.linspace(-2, 5, 40)
        fit = loess(x, 3 * x + 1, frac=frac)
        np.testing.assert_allclose(fit.fitted, 3 * fit.x + 1, rtol=0, atol=1e-9)
        assert fit.global_slope == pytest.approx(3.0, abs=1e-9)
        np.testing.assert_allclose(fit.local_slopes, 3.0, atol=1e-9)
        assert fit.r2 == pytest.approx(1.0, abs=1e-12)

    def test_constant(self):
        x = RngStream(0).generator.uniform(0, 1, 30)
        fit = loess(x, np.full(30, 2.5))
        np.testing.assert_allclose(fit.fitted, 2.5, atol=1e-12)
        assert fit.global_slope == pytest.approx(0.0, abs=1e-12)

    def test_smaller_span_tracks_curvature(self):
        x = np.linspace(-1, 1, 101)
        tight = loess(x, x * x, frac=0.3)
        wide = loess(x, x * x, frac=1.0)
        assert np.max(np.abs(tight.fitted - x * x)) < np.max(np.abs(wide.fitted - x * x))

    def test_all_x_equal_falls_back_to_mean(self):
        fit = loess(np.ones(6), np.array([1.0, 2, 3, 4, 5, 6]))
        np.testing.assert_allclose(fit.fitted, 3.5)

    def test_query_points(self):
        x = np.linspace(0, 1, 20)
        fit = loess(x, 2 * x, x_query=[0.25, 0.5])
        np.testing.assert_allclose(fit.fitted, [0.5, 1.0], atol=1e-12)

    @pytest.mark.parametrize("kw", [{"frac": 0.0}, {"frac": 1.5}, {"degree": 2}])
    def test_invalid(self, kw):
        x = np.arange(10.0)
        with pytest.raises(InvalidParameterError):
            loess(x, x, **kw)

    def test_too_few_points(self):
        with pytest.raises(InvalidParameterError):
            loess([1, 2, 3], [1, 2, 3])

    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        g = RngStream(seed).generator
        x = g.integers(0, 8, 40).astype(float)
        y = g.normal(size=40)
        perm = g.permutation(40)
        a, b = loess(x, y), loess(x[perm], y[perm])
        assert a.fitted.tobytes() == b.fitted.tobytes()
        assert a.global_slope == b.global_slope and a.r2 == b.r2


class TestRewardDistribution:
    def test_three_values(self):
        d = reward_distribution([1.0, 2.0, 3.0])
        assert (d["median"], d["q25"], d["q75"]) == (2.0, 1.5, 2.5)
        assert len(d["kde_x"]) == len(d["kde_density"]) == 100

    def test_constant_is_a_spike(self):
        d = reward_distribution([4.0] * 10)
        assert d["iqr"] == 0.0 and d["bandwidth"] == 0.0
        dens = np.array(d["kde_density"])
        assert np.count_nonzero(dens) == 1
        assert d["kde_x"][int(np.argmax(dens))] == 4.0

    def test_standard_normal(self):
        d = reward_distribution(RngStream(1).generator.normal(size=10**5))
        assert abs(d["median"]) < 0.02
        assert abs(d["iqr"] - 1.349) < 0.03
        assert np.trapezoid(d["kde_density"], d["kde_x"]) == pytest.approx(1.0, abs=1e-3)

    def test_empty(self):
        with pytest.raises(InvalidParameterError):
            reward_distribution([])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_order_invariant(self, values, seed):
        perm = RngStream(seed).generator.permutation(len(values))
        a = reward_distribution(values)
        b = reward_distribution(np.array(values)[perm])
        for key in ("median", "q25", "q75", "iqr"):
            assert a[key] == b[key]


class TestScatter:
    def test_fixed_agent_has_flat_trend(self):
        env = env_for()
        pts, fit = splitpoint_scatter(FixedSplitAgent(4), env, n=500, rng=0)
        assert pts.shape == (500, 2)
        assert np.all(pts[:, 1] == 4)
        assert fit.global_slope == 0.0
        np.testing.assert_allclose(fit.fitted, 4.0)

    def test_trained_agent_points(self):
        env = env_for()
        agent, _ = train_agent("ppo", env, total_steps=400, rng=0)
        pts, fit = splitpoint_scatter(agent, env, n=50, rng=1)
        assert len(pts) == 50 and np.all(np.isfinite(fit.fitted))
        assert np.all((pts[:, 1] >= 1) & (pts[:, 1] <= 7))


class TestCurves:
    def test_moving_average(self):
        x = np.array([1.0, 2, 3, 4, 5])
        np.testing.assert_allclose(moving_average(x, 1), x)
        np.testing.assert_allclose(moving_average(x, 3), [1.0, 1.5, 2.0, 3.0, 4.0], rtol=0, atol=1e-12)
        with pytest.raises(InvalidParameterError):
            moving_average(x, 0)

    def test_single_log_identity(self):
        steps = np.arange(1, 11)
        vals = RngStream(2).generator.normal(size=10)
        c = aggregate_curves([(steps, vals)], window=1)["agent"]
        np.testing.assert_array_equal(c["mean"], vals)
        assert np.all(c["stderr"] == 0) and not c["regridded"]

    def test_identical_logs_zero_stderr(self):
        steps = np.arange(1, 11)
        vals = RngStream(3).generator.normal(size=10)
        c = aggregate_curves({"ppo": [(steps, vals), (steps, vals.copy())]}, window=4)["ppo"]
        assert np.all(c["stderr"] == 0)
        np.testing.assert_allclose(c["mean"], moving_average(vals, 4), rtol=0, atol=1e-12)

    def test_synthetic_moving_average(self):
        steps = np.arange(1, 7)
        a = np.array([0.0, 2, 4, 6, 8, 10])
        b = np.array([2.0, 2, 2, 2, 2, 2])
        c = aggregate_curves({"x": [(steps, a), (steps, b)]}, window=2)["x"]
        ma = np.array([0.0, 1, 3, 5, 7, 9])
        np.testing.assert_allclose(c["mean"], (ma + 2) / 2, rtol=0, atol=1e-12)
        np.testing.assert_allclose(c["stderr"], np.abs(ma - 2) / 2, rtol=0, atol=1e-12)

    def test_mismatched_grid_is_regridded(self):
        c = aggregate_curves([(np.array([0.0, 2, 4]), np.array([0.0, 2, 4])),
                              (np.array([0.0, 4]), np.array([0.0, 4]))])["agent"]
        assert c["regridded"]
        np.testing.assert_allclose(c["mean"], [0, 2, 4])

    def test_run_logs(self):
        logs = [train_agent("random", env_for(s), total_steps=400, rng=s)[1] for s in range(2)]
        c = aggregate_curves({"random": logs}, window=10)
        rows = curves_to_rows(c)
        assert len(rows) == 400 and rows[0]["agent"] == "random"

    def test_empty_group(self):
        with pytest.raises(InvalidParameterError):
            aggregate_curves({"ppo": []})


class TestTests:
    def test_mann_kendall_trend(self):
        assert mann_kendall(np.arange(30.0))[2] < 1e-6
        s, z, p = mann_kendall(np.ones(20))
        assert s == 0 and z == 0 and p == 1.0

    def test_sign_test(self):
        assert sign_test(15, 20) < 0.05 < sign_test(14, 20)
        assert sign_test(20, 20) == pytest.approx(0.5 ** 20)


class TestSweeps:
    def test_hyperparameter_sweep_layout(self):
        grid = {"batch": (100, 200), "xi_gae": (0.9,)}
        out = hyperparameter_sweep(env_for, grid, seeds=(0, 1), total_steps=400)
        assert set(out) == {"batch", "xi_gae"}
        assert set(out["batch"]) == {100, 200}
        assert all(isinstance(run, RunLog) and len(run.steps) == 400 for run in out["batch"][200])
        assert out["batch"][200][1].run_id == "batch=200.seed1"

    def test_default_grid(self):
        assert HYPER_GRID["alpha"][0] == PpoHyper().alpha
        assert HYPER_GRID["batch"] == (100, 150, 200)
        assert HYPER_GRID["epsilon_clip"] == (0.1, 0.2, 0.3)
        assert HYPER_GRID["xi_gae"] == (0.90, 0.95, 0.99)

    def test_action_space_sweep(self):
        out = action_space_sweep(lambda u, seed: env_for(seed, u), us=(1, 2, 3), total_steps=400)
        assert [out[u]["n_actions"] for u in (1, 2, 3)] == [3, 5, 7]
        assert out[2]["actions"] == [-2, -1, 0, 1, 2]


class TestOutput:
    def test_rows_and_json(self, tmp_path):
        write_rows(tmp_path / "r.csv", [{"a": 1, "b": 2.5}])
        assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", "1,2.5"]
        with pytest.raises(InvalidParameterError):
            write_rows(tmp_path / "e.csv", [])
        write_json(tmp_path / "x.json", {"v": np.float64(1.5)})
        assert '"v": 1.5' in (tmp_path / "x.json").read_text()

    def test_analysis_is_reproducible_from_csv(self, tmp_path):
        _, log = train_agent("random", env_for(), total_steps=400, rng=0)
        log.to_csv(tmp_path / "run.csv")
        back = RunLog.from_csv(tmp_path / "run.csv")
        a = reward_distribution(back.rewards())
        b = reward_distribution(RunLog.from_csv(tmp_path / "run.csv").rewards())
        assert a == b
