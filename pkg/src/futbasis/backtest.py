"""Discrete-time backtests of the feedback strategies on simulated markets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .model import DerivedModel, Preferences
from .odesolve import OdeSolution, Variant
from .policy import strategy_coefficients
from .simulate import PathSet, build_tables, simulate_joint

__all__ = ["BacktestReport", "KdeResult", "run", "run_simulated", "kde", "silverman_bandwidth", "zero_strategy"]

log = logging.getLogger(__name__)

QUANTILES = (0.01, 0.05, 0.5, 0.95, 0.99)

# (t, wealth[paths], z[paths, N]) -> positions[paths, d]
Strategy = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KdeResult:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


@dataclass(frozen=True, eq=False)
class BacktestReport:
    """Outcome of trading one strategy over a set of simulated paths.

    ``wealth`` and ``positions`` are ``None`` when a streamed run was asked
    not to keep full paths.  Paths whose wealth reached zero or below are
    frozen at that value, flagged in ``failed`` and left out of
    ``mc_utility`` (utility is undefined there); every other statistic uses
    all paths.
    """

    variant: Variant
    gamma: float
    x0: float
    horizon: float
    rate: float
    terminal: np.ndarray
    failed: np.ndarray
    wealth: Optional[np.ndarray]
    positions: Optional[np.ndarray]
    terminal_stats: dict
    sharpe: float
    mc_utility: tuple[float, float]
    kde: Optional[KdeResult]
    seed: Optional[int]
    n_paths: int
    n_steps: int
    extra: dict = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def summary(self) -> dict:
        return {
            "variant": self.variant.value,
            "gamma": self.gamma,
            "x0": self.x0,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "n_steps": self.n_steps,
            "n_failed": self.n_failed,
            "sharpe": self.sharpe,
            "mc_utility_mean": self.mc_utility[0],
            "mc_utility_se": self.mc_utility[1],
            "terminal_stats": self.terminal_stats,
            **self.extra,
        }


def zero_strategy(dim: int) -> Strategy:
    """Hold only cash."""
    return lambda t, x, z: np.zeros((x.shape[0], dim))


def _optimal(sol: OdeSolution) -> Strategy:
    cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def strategy(t, x, z):
        if t not in cache:
            cache[t] = strategy_coefficients(sol, t)
        const, slope = cache[t]
        return x[:, None] * (const + z @ slope.T)

    return strategy


def _simulate_wealth(
    variant: Variant, rate: float, paths: PathSet, x0: float, strategy: Strategy, keep: bool
):
    n = paths.z.shape[2]
    dim = n if variant is Variant.FUTURES_ONLY else 2 * n
    n_paths, n_steps = paths.n_paths, paths.n_steps
    times = paths.times
    x = np.full(n_paths, float(x0))
    failed = np.zeros(n_paths, dtype=bool)
    wealth = np.empty((n_paths, n_steps + 1)) if keep else None
    positions = np.zeros((n_paths, n_steps, dim)) if keep else None
    if keep:
        wealth[:, 0] = x
    for step in range(n_steps):
        dt = times[step + 1] - times[step]
        pos = np.asarray(strategy(float(times[step]), x, paths.z[:, step]), dtype=float)
        if pos.shape != (n_paths, dim):
            raise ValueError(f"strategy returned shape {pos.shape}, expected {(n_paths, dim)}")
        pos = np.where(failed[:, None], 0.0, pos)
        gross_f = paths.f[:, step + 1] / paths.f[:, step] - 1.0
        gain = np.einsum("pi,pi->p", pos[:, :n], gross_f)
        cash = x
        if variant is Variant.FULL_MARKET:
            gross_s = paths.s[:, step + 1] / paths.s[:, step] - 1.0
            gain = gain + np.einsum("pi,pi->p", pos[:, n:], gross_s)
            cash = x - pos[:, n:].sum(axis=1)
        x_new = x + gain + rate * cash * dt
        x = np.where(failed, x, x_new)
        failed |= x <= 0
        if keep:
            wealth[:, step + 1] = x
            positions[:, step] = pos
    return x, failed, wealth, positions


def _report(variant, gamma, x0, horizon, rate, terminal, failed, wealth, positions, seed, n_steps, with_kde=True):
    ret = terminal / x0 - 1.0
    sd = float(np.std(ret, ddof=1)) if len(ret) > 1 else float("nan")
    sharpe = (float(np.mean(ret)) - rate * horizon) / sd if sd > 0 else float("nan")
    q = np.quantile(terminal, QUANTILES)
    tstats = {
        "mean": float(np.mean(terminal)),
        "std": float(np.std(terminal, ddof=1)) if len(terminal) > 1 else float("nan"),
        "min": float(np.min(terminal)),
        "max": float(np.max(terminal)),
        "skewness": float(stats.skew(terminal)) if len(terminal) > 2 and np.ptp(terminal) > 0 else float("nan"),
        **{f"q{int(round(p * 100)):02d}": float(v) for p, v in zip(QUANTILES, q)},
    }
    ok = terminal[~failed]
    util = ok ** (1 - gamma) / (1 - gamma)
    se = float(np.std(util, ddof=1) / np.sqrt(len(util))) if len(util) > 1 else float("nan")
    mc = (float(np.mean(util)) if len(util) else float("nan"), se)
    density = None
    if with_kde and len(terminal) >= 2 and np.ptp(terminal) > 0:
        density = kde(terminal)
    if failed.any():
        log.warning("%d of %d paths hit non-positive wealth", int(failed.sum()), len(failed))
    return BacktestReport(
        variant, float(gamma), float(x0), float(horizon), float(rate), terminal, failed, wealth, positions,
        tstats, sharpe, mc, density, seed, len(terminal), int(n_steps),
    )


def run(
    model: DerivedModel,
    prefs: Preferences,
    sol: OdeSolution,
    paths: PathSet,
    x0: float = 1.0,
    strategy: Optional[Strategy] = None,
) -> BacktestReport:
    """Trade the optimal feedback rule of ``sol`` (or ``strategy``) along ``paths``.

    Positions are set at the left end of each step from ``(t_n, X_n, Z_n)``
    and wealth moves by the self-financing update over the step.
    """
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    if paths.f is None or paths.s is None:
        raise ValueError("backtests need spot and futures paths (use simulate_joint)")
    if paths.model is not None and paths.model.params != model.params:
        raise ValueError("paths were generated from a different model")
    if sol.model.params != model.params:
        raise ValueError("solution was computed for a different model")
    if not np.isclose(paths.times[-1], model.horizon):
        raise ValueError("paths do not span the model horizon")
    if prefs.gamma != sol.gamma:
        raise ValueError("preferences do not match the solution's gamma")
    strat = strategy if strategy is not None else _optimal(sol)
    x, failed, wealth, positions = _simulate_wealth(sol.variant, model.params.rate, paths, x0, strat, keep=True)
    return _report(
        sol.variant, prefs.gamma, x0, model.horizon, model.params.rate, x, failed, wealth, positions,
        paths.seed, paths.n_steps,
    )


def run_simulated(
    model: DerivedModel,
    prefs: Preferences,
    sol: OdeSolution,
    n_paths: int,
    n_steps: int,
    seed: int,
    x0: float = 1.0,
    s0=1.0,
    z0=0.0,
    chunk_size: int = 1000,
    keep_paths: bool = False,
    strategy: Optional[Strategy] = None,
) -> BacktestReport:
    """Simulate and backtest in chunks of paths to bound memory.

    Each path draws from its own random stream, so the result does not depend
    on ``chunk_size``.
    """
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    tables = build_tables(model, n_steps)
    strat = strategy if strategy is not None else _optimal(sol)
    terminals, fails, wealths, poss = [], [], [], []
    for start in range(0, n_paths, chunk_size):
        size = min(chunk_size, n_paths - start)
        paths = simulate_joint(model, tables, s0, z0, size, seed, path_offset=start)
        x, failed, wealth, positions = _simulate_wealth(sol.variant, model.params.rate, paths, x0, strat, keep_paths)
        terminals.append(x)
        fails.append(failed)
        if keep_paths:
            wealths.append(wealth)
            poss.append(positions)
    return _report(
        sol.variant, prefs.gamma, x0, model.horizon, model.params.rate,
        np.concatenate(terminals), np.concatenate(fails),
        np.concatenate(wealths) if keep_paths else None,
        np.concatenate(poss) if keep_paths else None,
        seed, n_steps,
    )


def silverman_bandwidth(samples) -> float:
    """Silverman's rule of thumb, ``0.9 min(sd, IQR / 1.34) n^(-1/5)``."""
    x = np.asarray(samples, dtype=float)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return float(0.9 * spread * len(x) ** (-0.2))


def kde_pdf(samples, points, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel density estimate evaluated at ``points``."""
    x = np.asarray(samples, dtype=float)
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    out = np.empty(pts.shape)
    chunk = max(1, 2_000_000 // max(len(x), 1))
    for i in range(0, len(pts), chunk):
        u = (pts[i : i + chunk, None] - x[None, :]) / bandwidth
        out[i : i + chunk] = np.exp(-0.5 * u * u).sum(axis=1)
    return out / (len(x) * bandwidth * np.sqrt(2 * np.pi))


def kde(samples, bandwidth: Optional[float] = None, n_grid: int = 512) -> KdeResult:
    """Gaussian KDE on ``n_grid`` points spanning ``[min - 3h, max + 3h]``."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("kde needs at least two samples")
    if not np.ptp(x) > 0:
        raise ValueError("kde of degenerate samples (zero variance)")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    return KdeResult(grid, kde_pdf(x, grid, h), h)
