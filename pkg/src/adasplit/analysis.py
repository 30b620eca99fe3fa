"""Summaries of training runs: LOESS trends, reward distributions, learning
curves and the hyperparameter / action-space sweep drivers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .agents import Agent, PpoHyper, RunLog, evaluate_policy, train_agent
from .exceptions import InvalidParameterError
from .mathcore import RngStream

# Fig.-8 style grids; the first entry of each is the default hyperparameter.
HYPER_GRID = {
    "alpha": (0.0003, 0.0005, 0.0007),
    "batch": (100, 150, 200),
    "epsilon_clip": (0.1, 0.2, 0.3),
    "xi_gae": (0.90, 0.95, 0.99),
}


@dataclass
class TrendFit:
    x: np.ndarray
    fitted: np.ndarray
    local_slopes: np.ndarray
    global_slope: float
    r2: float

    def to_rows(self) -> list:
        return [{"x": float(a), "fitted": float(b), "slope": float(c)}
                for a, b, c in zip(self.x, self.fitted, self.local_slopes)]


def _tricube(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def _local_fit(xs, ys, x0, k, degree):
    d = np.abs(xs - x0)
    h = np.partition(d, k - 1)[k - 1]
    if h == 0:
        # every neighbour sits on x0: nothing to regress on
        near = d == 0
        return float(ys[near].mean()), 0.0
    w = _tricube(d / h)
    sw = w.sum()
    xbar = float(w @ xs) / sw
    ybar = float(w @ ys) / sw
    if degree == 0:
        return ybar, 0.0
    dx = xs - xbar
    sxx = float(w @ (dx * dx))
    if sxx <= 1e-300 * max(1.0, xbar * xbar):
        return ybar, 0.0
    slope = float(w @ (dx * (ys - ybar))) / sxx
    return ybar + slope * (x0 - xbar), slope


def loess(x, y, frac: float = 0.3, degree: int = 1, x_query=None) -> TrendFit:
    """Locally weighted regression with tricube weights.

    Each query point uses its ``ceil(frac * n)`` nearest neighbours, weighted
    by ``(1 - (d/h)^3)^3`` where ``h`` is the distance to the farthest of
    them. Neighbourhoods with no spread in x fall back to a weighted mean.
    Points are sorted first, so the result does not depend on input order.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidParameterError("x and y must be 1-d arrays of equal length")
    if len(x) < 5:
        raise InvalidParameterError(f"loess needs at least 5 points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("x must be finite")
    if not 0 < frac <= 1:
        raise InvalidParameterError(f"frac must be in (0, 1], got {frac}")
    if degree not in (0, 1):
        raise InvalidParameterError(f"degree must be 0 or 1, got {degree}")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    # centring on one sample keeps a constant series exact through the weighted means
    y0 = float(ys[0])
    yc = ys - y0
    n = len(xs)
    k = max(2, math.ceil(frac * n))
    k = min(k, n)
    at_data = x_query is None
    xq = xs if at_data else np.asarray(x_query, dtype=np.float64)
    fitted = np.empty(len(xq))
    slopes = np.empty(len(xq))
    for i, x0 in enumerate(xq):
        fitted[i], slopes[i] = _local_fit(xs, yc, x0, k, degree)
    fitted += y0
    at_points = fitted if at_data else np.array([_local_fit(xs, yc, x0, k, degree)[0] for x0 in xs]) + y0
    ss_res = float(np.sum((ys - at_points) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -math.inf
    dx = xq - xq.mean()
    sxx = float(dx @ dx)
    global_slope = float(dx @ (fitted - fitted.mean())) / sxx if sxx > 0 else 0.0
    return TrendFit(xq, fitted, slopes, global_slope, r2)


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(x.std(ddof=1), iqr / 1.349) if iqr > 0 else x.std(ddof=1)
    return 0.9 * spread * len(x) ** -0.2


def reward_distribution(rewards, bins: int = 20, n_kde: int = 100) -> dict:
    """Median, quartiles, fixed-bin histogram and Gaussian KDE for violin plots.

    A zero-spread sample has bandwidth 0; its KDE is a single spike whose
    grid cell carries unit mass.
    """
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size == 0:
        raise InvalidParameterError("reward_distribution needs at least one value")
    q25, med, q75 = np.percentile(r, [25, 50, 75])
    counts, edges = np.histogram(r, bins=bins)
    bw = silverman_bandwidth(r) if r.size > 1 else 0.0
    if bw > 0:
        grid = np.linspace(r.min() - 3 * bw, r.max() + 3 * bw, n_kde)
        z = (grid[:, None] - r[None, :]) / bw
        density = np.exp(-0.5 * z * z).sum(axis=1) / (r.size * bw * math.sqrt(2 * math.pi))
    else:
        c = float(r[0])
        grid = np.linspace(c - 1.0, c + 1.0, n_kde)
        density = np.zeros(n_kde)
        centre = int(np.argmin(np.abs(grid - c)))
        grid[centre] = c
        density[centre] = 1.0 / (grid[1] - grid[0])
    return {"median": float(med), "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25),
            "mean": float(r.mean()), "n": int(r.size), "hist_counts": counts.tolist(),
            "hist_edges": edges.tolist(), "bandwidth": float(bw), "kde_x": grid.tolist(),
            "kde_density": density.tolist()}


def splitpoint_scatter(agent: Agent, env, n: int = 500, rng: RngStream | int = 0, frac: float = 0.3):
    """Greedy episodes on case A; returns ``((n, 2) array of (sigma, p), TrendFit)``.

    Each point is the final state of one episode.
    """
    env_a = env.with_case("A") if env.case.name != "A" else env
    res = evaluate_policy(agent, env_a, n, rng, "greedy")
    pts = np.array([[s.sigma, s.p] for s in res.final_states], dtype=np.float64)
    return pts, loess(pts[:, 0], pts[:, 1], frac=frac)


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    x = np.asarray(x, dtype=np.float64)
    if window < 1:
        raise InvalidParameterError("window must be >= 1")
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _series(log) -> tuple:
    if isinstance(log, RunLog):
        steps = np.array([row["step"] for row in log.steps], dtype=np.float64)
        return steps, log.rewards()
    steps, values = log
    return np.asarray(steps, dtype=np.float64), np.asarray(values, dtype=np.float64)


def aggregate_curves(logs, window: int = 1) -> dict:
    """Per-agent smoothed mean and standard error across seeds.

    ``logs`` maps agent name to a list of RunLogs (or ``(steps, values)``
    pairs); a bare list is treated as one agent named ``"agent"``. Logs on a
    different step grid are linearly interpolated onto the first one's and
    the result is flagged ``regridded``.
    """
    if not isinstance(logs, dict):
        logs = {"agent": list(logs)}
    out = {}
    for name, group in logs.items():
        series = [_series(g) for g in group]
        if not series:
            raise InvalidParameterError(f"no logs for {name!r}")
        grid = series[0][0]
        regridded = False
        rows = []
        for steps, vals in series:
            if len(steps) != len(grid) or not np.array_equal(steps, grid):
                vals = np.interp(grid, steps, vals)
                regridded = True
            rows.append(moving_average(vals, window))
        mat = np.stack(rows)
        mean = mat.mean(axis=0)
        stderr = mat.std(axis=0, ddof=1) / math.sqrt(len(rows)) if len(rows) > 1 else np.zeros_like(mean)
        out[name] = {"step": grid, "mean": mean, "stderr": stderr, "n_runs": len(rows), "regridded": regridded}
    return out


def mann_kendall(series) -> tuple:
    """Mann-Kendall trend test without tie correction. Returns ``(S, z, p)``."""
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    s = 0.0
    for i in range(n - 1):
        s += np.sign(x[i + 1:] - x[i]).sum()
    var = n * (n - 1) * (2 * n + 5) / 18.0
    z = 0.0 if s == 0 else (s - np.sign(s)) / math.sqrt(var)
    return float(s), float(z), float(2 * stats.norm.sf(abs(z)))


def sign_test(wins: int, n: int) -> float:
    """One-sided p-value of ``wins`` successes out of ``n`` under p = 1/2."""
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def hyperparameter_sweep(env_factory, grid: dict = HYPER_GRID, seeds=(0,), total_steps: int = 24_000,
                         base: PpoHyper = PpoHyper(), kind: str = "ppo") -> dict:
    """Vary one PPO hyperparameter at a time around ``base``.

    ``env_factory(seed)`` builds a fresh environment. Returns
    ``{param: {value: [RunLog per seed]}}``.
    """
    out = {}
    for name, values in grid.items():
        out[name] = {}
        for v in values:
            hyper = replace(base, **{name: v})
            runs = []
            for seed in seeds:
                _, run_log = train_agent(kind, env_factory(seed), hyper, total_steps, seed,
                                         run_id=f"{name}={v}.seed{seed}")
                runs.append(run_log)
            out[name][v] = runs
    return out


def action_space_sweep(env_factory, us=(1, 2, 3), seeds=(0,), total_steps: int = 24_000,
                       hyper: PpoHyper = PpoHyper(), kind: str = "ppo") -> dict:
    """Train with moves of up to ``u`` layers per step.

    ``env_factory(u, seed)`` builds the environment. Returns
    ``{u: {"actions": [...], "logs": [RunLog per seed]}}``.
    """
    out = {}
    for u in us:
        logs, actions = [], None
        for seed in seeds:
            env = env_factory(u, seed)
            actions = env.actions
            _, run_log = train_agent(kind, env, hyper, total_steps, seed, run_id=f"u{u}.seed{seed}")
            logs.append(run_log)
        out[u] = {"actions": actions, "n_actions": len(actions), "logs": logs}
    return out


def write_rows(path, rows: list) -> None:
    if not rows:
        raise InvalidParameterError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def curves_to_rows(curves: dict) -> list:
    rows = []
    for name, c in curves.items():
        for s, m, e in zip(c["step"], c["mean"], c["stderr"]):
            rows.append({"agent": name, "step": int(s), "mean": float(m), "stderr": float(e)})
    return rows


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
