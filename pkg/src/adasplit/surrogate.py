"""Learned reward model: an MLP mapping (p, sigma, m) to perplexity, and the
training loop that swaps it in for the language model after T epochs."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from itertools import product

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .agents import PpoHyper, RunLog, train_agent
from .channel import ShapeCalibrator
from .environment import EnvConfig, SplitEnv, State, channel_for, get_case, ppl_ceiling
from .exceptions import InvalidDatasetError, InvalidParameterError
from .mathcore import RngStream, as_stream
from .neuralnet import AdamState, MlpSpec, adam_step, init_mlp, load_checkpoint, mlp_backward, \
    mlp_forward, mlp_predict, save_checkpoint

log = logging.getLogger(__name__)

RECORD_FIELDS = ("p", "sigma", "m", "ppl")
MIN_RECORDS_PER_FOLD = 10


@dataclass(frozen=True)
class SurrogateRecord:
    p: int
    sigma: float
    m: float
    ppl: float


def records_to_array(records) -> tuple:
    X = np.array([[r.p, r.sigma, r.m] for r in records], dtype=np.float64).reshape(-1, 3)
    y = np.array([r.ppl for r in records], dtype=np.float64)
    return X, y


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.p, repr(r.sigma), repr(r.m), repr(r.ppl)])


def read_records(path) -> list:
    with open(path, newline="") as fh:
        return [SurrogateRecord(int(row["p"]), float(row["sigma"]), float(row["m"]), float(row["ppl"]))
                for row in csv.DictReader(fh)]


@dataclass(frozen=True)
class Lattice:
    """Full grid sampling plan."""

    p_values: tuple
    sigma_values: tuple
    m_values: tuple

    def points(self) -> list:
        return list(product(self.p_values, self.sigma_values, self.m_values))


def collect_records(oracle, plan="random", n: int | None = None, rng: RngStream | int = 0,
                    env_cfg: EnvConfig = EnvConfig(), case="A") -> list:
    """Measure channel-averaged PPL at ``n`` points of a sampling plan.

    ``plan`` is a :class:`Lattice` or ``"random"``: p uniform over
    ``1..L-1``, loss probability uniform over the case's range (converted
    to ``m``) and sigma uniform over ``env_cfg.sigma_range``. Stored PPL is
    clamped at the reward ceiling.
    """
    rng = as_stream(rng)
    ceiling = ppl_ceiling(oracle.config, env_cfg)
    if isinstance(plan, Lattice):
        points = plan.points()
        if n is not None and n != len(points):
            raise InvalidParameterError(f"lattice has {len(points)} points, n={n} requested")
    elif plan == "random":
        if n is None or n < 1:
            raise InvalidParameterError("random plan needs n >= 1")
        c = get_case(case)
        cal = ShapeCalibrator(env_cfg.omega, env_cfg.h_th)
        g = rng.child("plan").generator
        ps = g.integers(1, oracle.config.n_layers, size=n)
        sig = g.uniform(*env_cfg.sigma_range, size=n)
        loss = g.uniform(*c.loss_range, size=n)
        ms = cal(loss)
        points = list(zip(ps.tolist(), sig.tolist(), np.atleast_1d(ms).tolist()))
    else:
        raise InvalidParameterError(f"unknown sampling plan {plan!r}")
    out = []
    for i, (p, sigma, m) in enumerate(points):
        res = oracle.ppl(int(p), channel_for(State(float(sigma), float(m), int(p)), env_cfg), rng.child("record", i))
        out.append(SurrogateRecord(int(p), float(sigma), float(m), min(res.ppl, ceiling)))
    return out


@dataclass
class CvReport:
    k: int
    fold_sizes: list
    fold_mse: list
    fold_mae: list
    mean_mse: float
    mean_mae: float
    target_var: float

    @property
    def normalized_mse(self) -> float:
        return self.mean_mse / self.target_var if self.target_var > 0 else (0.0 if self.mean_mse == 0 else math.inf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalized_mse"] = self.normalized_mse
        return d


class SurrogateRegressor(RegressorMixin, BaseEstimator):
    """MLP regressor on standardized inputs and targets.

    Columns of ``X`` are ``(p, sigma, m)``. The per-column training range is
    kept as the hull used to flag extrapolation.
    """

    def __init__(self, hidden=(64, 64), activation="relu", epochs=150, batch_size=64, lr=1e-2,
                 random_state=0):
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        rng = as_stream(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.x_mean_, self.x_std_ = X.mean(axis=0), X.std(axis=0)
        self.x_std_[self.x_std_ == 0] = 1.0
        self.y_mean_, self.y_std_ = float(y.mean()), float(y.std())
        self.hull_lo_, self.hull_hi_ = X.min(axis=0), X.max(axis=0)
        spec = MlpSpec((X.shape[1], *self.hidden, 1), self.activation, "identity")
        self.params_ = init_mlp(spec, rng.child("init"))
        self.loss_curve_ = []
        if self.y_std_ == 0:
            # constant target: a zero output layer predicts the mean exactly
            self.y_std_ = 1.0
            self.params_.weights[-1][:] = 0.0
            self.params_.biases[-1][:] = 0.0
            return self
        Xs = (X - self.x_mean_) / self.x_std_
        ys = ((y - self.y_mean_) / self.y_std_)[:, None]
        adam = AdamState.for_params(self.params_.arrays(), lr=self.lr, max_grad_norm=None)
        gen = rng.child("batches").generator
        n = len(y)
        for epoch in range(self.epochs):
            # cosine decay to 1% of the base rate sharpens the final fit
            adam.lr = self.lr * (0.01 + 0.99 * 0.5 * (1 + math.cos(math.pi * epoch / self.epochs)))
            order = gen.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                out, cache = mlp_forward(self.params_, Xs[idx])
                diff = out - ys[idx]
                total += float(np.sum(diff * diff))
                grads = mlp_backward(self.params_, cache, 2.0 * diff / len(idx))
                adam_step(self.params_.arrays(), grads.arrays(), adam)
            self.loss_curve_.append(total / n)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        out = mlp_predict(self.params_, (X - self.x_mean_) / self.x_std_)[:, 0]
        return out * self.y_std_ + self.y_mean_

    def extrapolating(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.any((X < self.hull_lo_) | (X > self.hull_hi_), axis=1)

    def predict_one(self, p, sigma, m):
        """``(ppl, extrapolating)`` for one state; used by the environment."""
        x = np.array([[p, sigma, m]], dtype=np.float64)
        out = mlp_predict(self.params_, (x - self.x_mean_) / self.x_std_)[0, 0]
        return float(out * self.y_std_ + self.y_mean_), bool(self.extrapolating(x)[0])

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        header = {"normalization": {"x_mean": self.x_mean_.tolist(), "x_std": self.x_std_.tolist(),
                                    "y_mean": self.y_mean_, "y_std": self.y_std_},
                  "hull": {"lo": self.hull_lo_.tolist(), "hi": self.hull_hi_.tolist()},
                  "estimator": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}}
        save_checkpoint(path, self.params_, header)

    @classmethod
    def load(cls, path) -> "SurrogateRegressor":
        params, doc = load_checkpoint(path)
        kw = dict(doc["estimator"])
        kw["hidden"] = tuple(kw["hidden"])
        est = cls(**kw)
        norm = doc["normalization"]
        est.params_ = params
        est.x_mean_, est.x_std_ = np.array(norm["x_mean"]), np.array(norm["x_std"])
        est.y_mean_, est.y_std_ = norm["y_mean"], norm["y_std"]
        est.hull_lo_, est.hull_hi_ = np.array(doc["hull"]["lo"]), np.array(doc["hull"]["hi"])
        est.n_features_in_ = 3
        return est


def kfold_indices(n: int, k: int, rng: RngStream) -> list:
    """Shuffled partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one."""
    order = rng.generator.permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]


def fit_surrogate(records, k: int = 5, rng: RngStream | int = 0, **estimator_params):
    """k-fold cross-validation, then a final fit on all records.

    Returns ``(SurrogateRegressor, CvReport)``. Raises
    ``InvalidDatasetError`` with fewer than ``10 * k`` records.
    """
    if k < 2:
        raise InvalidParameterError(f"need k >= 2 folds, got {k}")
    X, y = records_to_array(records)
    if len(y) < MIN_RECORDS_PER_FOLD * k:
        raise InvalidDatasetError(f"need at least {MIN_RECORDS_PER_FOLD * k} records for {k}-fold CV, got {len(y)}")
    rng = as_stream(rng)
    folds = kfold_indices(len(y), k, rng.child("folds"))
    mse, mae = [], []
    for i, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(y)), test)
        est = SurrogateRegressor(random_state=rng.child("fold", i).stream_id % 2**63, **estimator_params)
        est.fit(X[train], y[train])
        err = est.predict(X[test]) - y[test]
        mse.append(float(np.mean(err * err)))
        mae.append(float(np.mean(np.abs(err))))
    report = CvReport(k, [len(f) for f in folds], mse, mae, float(np.mean(mse)), float(np.mean(mae)),
                      float(np.var(y)))
    model = SurrogateRegressor(random_state=rng.child("final").stream_id % 2**63, **estimator_params).fit(X, y)
    return model, report


def surrogate_predict(model: SurrogateRegressor, p, sigma, m):
    """``(ppl, extrapolating)``."""
    return model.predict_one(p, sigma, m)


class SurrogateSwitch:
    """Training callback that gathers true-reward records and, after epoch
    ``T``, fits the surrogate and moves the environment onto it.

    The switch is refused (and training stays on true rewards) when the
    normalized CV MSE exceeds ``gate``.
    """

    def __init__(self, env: SplitEnv, T: int, gate: float = 0.25, k: int = 5, rng: RngStream | int = 0,
                 **estimator_params):
        self.env = env
        self.T = T
        self.gate = gate
        self.k = k
        self.rng = as_stream(rng)
        self.estimator_params = estimator_params
        self.records = []
        self.model = None
        self.report = None
        self.ceiling = ppl_ceiling(env.config, env.env_cfg)

    def __call__(self, agent, buffer, run_log: RunLog, rnd: int) -> None:
        for rec, src in zip(buffer.records, buffer.sources):
            if src == "true":
                p, sigma, m, ppl = rec
                self.records.append(SurrogateRecord(p, sigma, m, min(ppl, self.ceiling)))
        if rnd + 1 != self.T:
            return
        t0 = time.perf_counter()
        model, report = fit_surrogate(self.records, self.k, self.rng.child("fit"), **self.estimator_params)
        self.report = report
        ev = run_log.events
        ev["surrogate_cv"] = report.to_dict()
        ev["surrogate_fit_seconds"] = time.perf_counter() - t0
        ev["n_records"] = len(self.records)
        if report.normalized_mse > self.gate:
            log.warning("surrogate switch refused: normalized CV MSE %.3g > gate %.3g",
                        report.normalized_mse, self.gate)
            ev["switch_refused"] = True
            return
        self.model = model
        self.env.set_reward_source("surrogate", model)
        ev["switch_epoch"] = self.T
        ev["switch_step"] = len(run_log.steps)
        ev["lm_calls_at_switch"] = self.env.lm_calls


def default_threshold(hyper: PpoHyper, min_records: int = 2000) -> int:
    """First epoch at which at least ``min_records`` true-reward steps exist."""
    return math.ceil(min_records / hyper.n_step)


def algorithm1_train(env: SplitEnv, hyper: PpoHyper = PpoHyper(), T: int | None = None,
                     total_steps: int = 24_000, rng: RngStream | int = 0, gate: float = 0.25,
                     k: int = 5, run_id: str = "", config: dict | None = None, **estimator_params):
    """PPO on true rewards for ``T`` epochs, then on surrogate rewards.

    Returns ``(agent, RunLog, SurrogateRegressor or None)``. The log's
    ``events`` record the switch epoch, CV report and LM call counts.
    """
    rng = as_stream(rng)
    T = default_threshold(hyper) if T is None else T
    switch = SurrogateSwitch(env, T, gate, k, rng.child("surrogate"), **estimator_params)
    agent, run_log = train_agent("ppo", env, hyper, total_steps, rng, callbacks=[switch], run_id=run_id,
                                 config=config)
    run_log.events["lm_calls_final"] = env.lm_calls
    run_log.events["threshold"] = T
    return agent, run_log, switch.model


def paired_runs(env: SplitEnv, hyper: PpoHyper = PpoHyper(), T: int | None = None, total_steps: int = 24_000,
                rng: RngStream | int = 0, gate: float = 0.25, k: int = 5, **estimator_params) -> dict:
    """Surrogate-switching PPO and true-reward PPO from one shared prefix.

    Both runs are identical for the first ``T`` epochs, so that prefix is
    trained once and then forked. The ``"algorithm1"`` branch reproduces
    :func:`algorithm1_train` exactly and the ``"true"`` branch reproduces
    :func:`train_agent` on true rewards. Returns
    ``{"algorithm1": (agent, log, model), "true": (agent, log)}``.
    """
    rng = as_stream(rng)
    T = default_threshold(hyper) if T is None else T
    prefix = min(T * hyper.n_step, total_steps)
    switch = SurrogateSwitch(env, T, gate, k, rng.child("surrogate"), **estimator_params)
    agent, run_log = train_agent("ppo", env, hyper, prefix, rng, callbacks=[switch])
    true_env = env.fork()
    true_env.reward_source = "true"
    true_agent = copy.deepcopy(agent)
    true_log = copy.deepcopy(run_log)
    for key in ("surrogate_cv", "surrogate_fit_seconds", "n_records", "switch_epoch", "switch_step",
                "lm_calls_at_switch", "switch_refused"):
        true_log.events.pop(key, None)
    start = math.ceil(prefix / hyper.n_step)
    agent, run_log = train_agent("ppo", env, hyper, total_steps, rng, callbacks=[switch], agent=agent,
                                 log=run_log, start_round=start)
    run_log.events["lm_calls_final"] = env.lm_calls
    run_log.events["threshold"] = T
    true_agent, true_log = train_agent("ppo", true_env, hyper, total_steps, rng, agent=true_agent,
                                       log=true_log, start_round=start)
    return {"algorithm1": (agent, run_log, switch.model), "true": (true_agent, true_log)}
