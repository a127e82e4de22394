"""Riccati, linear and quadrature pieces of the value-function exponent.

Both trading problems share the ansatz ``f(tau) + z.g(tau) - z.H(tau)z / 2``
in time-to-horizon ``tau = T - t``, and the coefficients obey

    H' = -H Q H + L H + H L^T + R
    g' = (L - H Q) g - H s + c
    f' = f0 + g.Q g / 2 + s.g - tr(Sigma_Z H) / 2

with ``H(0) = g(0) = f(0) = 0``.  The variants differ only in ``Q``, ``L``,
``R``, ``s``, ``c`` and ``f0`` (see :func:`coefficients`).  ``L``, ``R`` and
``c`` depend on ``tau`` through the bridge coefficients at ``t = T - tau``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
import numpy as np

from .model import DerivedModel, Preferences

__all__ = [
    "Variant",
    "Coefficients",
    "OdeSolution",
    "NumericalFailure",
    "coefficients",
    "solve_h",
    "solve_g",
    "compute_f",
    "solve",
    "DEFAULT_STEPS",
    "BLOWUP_NORM",
    "to_table",
]

DEFAULT_STEPS = 4000
BLOWUP_NORM = 1e8
PSD_RTOL = 1e-10


class Variant(str, enum.Enum):
    FUTURES_ONLY = "futures"
    FULL_MARKET = "full"

    @classmethod
    def parse(cls, v) -> "Variant":
        if isinstance(v, cls):
            return v
        key = str(v).lower().replace("-", "_")
        aliases = {"futures": cls.FUTURES_ONLY, "futures_only": cls.FUTURES_ONLY, "futuresonly": cls.FUTURES_ONLY,
                   "full": cls.FULL_MARKET, "full_market": cls.FULL_MARKET, "fullmarket": cls.FULL_MARKET}
        if key not in aliases:
            raise ValueError(f"unknown variant {v!r}; expected 'futures' or 'full'")
        return aliases[key]


class NumericalFailure(RuntimeError):
    """The Riccati flow lost definiteness or blew up."""

    def __init__(self, message: str, tau: float):
        self.tau = float(tau)
        super().__init__(f"{message} at tau={tau:.6g}")


@dataclass(frozen=True, eq=False)
class Coefficients:
    """Constant and time-dependent coefficients of one (model, gamma, variant).

    Every bridge coefficient is a constant divided by ``T_i - t``, so with
    ``w_i(tau) = 1 / (T_i - T + tau)`` the time dependence factors out:
    ``L = diag(w) L0``, ``R = (w w^T) * R0`` elementwise and ``c = w * c0``.
    """

    model: DerivedModel
    gamma: float
    variant: Variant
    q: np.ndarray
    s: np.ndarray
    f0: float
    l0: np.ndarray
    r0: np.ndarray
    c0: np.ndarray

    def weights(self, tau: float) -> np.ndarray:
        return 1.0 / (self.model.maturities - self.model.horizon + tau)

    def linear(self, tau: float) -> np.ndarray:
        """``L(tau)``."""
        return self.weights(tau)[:, None] * self.l0

    def source(self, tau: float) -> np.ndarray:
        """``R(tau)``, the constant term of the Riccati equation."""
        w = self.weights(tau)
        return np.outer(w, w) * self.r0

    def g_forcing(self, tau: float) -> np.ndarray:
        """``c(tau)``, the inhomogeneous term of the g-equation."""
        return self.weights(tau) * self.c0


def coefficients(model: DerivedModel, gamma: float, variant) -> Coefficients:
    variant = Variant.parse(variant)
    g = float(gamma)
    r = model.params.rate
    n = model.n
    eta_f, eta_s = model.params.eta_f, model.params.eta_s
    if variant is Variant.FUTURES_ONLY:
        q = g * model.sigma_z + (1.0 - g) * model.a_mat
        mu = model.params.mu_f
        weight = model.sigma_f_inv
        s = model.m + (1.0 / g - 1.0) * model.b_mat.T @ mu
        l0 = np.diag(eta_f - eta_s) + (1.0 / g - 1.0) * eta_f[:, None] * model.b_mat
        # eta(t) has one diagonal block here
        fold = np.eye(n)
        eta0 = eta_f
    else:
        q = model.sigma_z.copy()
        mu = model.mu
        weight = model.sigma_inv
        s = model.m + (1.0 / g - 1.0) * model.c_mat.T @ mu
        l0 = np.diag(eta_f - eta_s) / g
        # eta(t) stacks diagonal futures and spot blocks: eta = diag(eta0 * [w; w]) @ fold
        fold = np.vstack([np.eye(n), np.eye(n)])
        eta0 = np.concatenate([eta_f, eta_s])
    r0 = (g - 1.0) / g**2 * fold.T @ (np.outer(eta0, eta0) * weight) @ fold
    c0 = (1.0 - g) / g**2 * fold.T @ (eta0 * (weight @ mu))
    f0 = (1.0 - g) / g * (r + mu @ weight @ mu / (2.0 * g))
    return Coefficients(model, g, variant, 0.5 * (q + q.T), s, float(f0), l0, 0.5 * (r0 + r0.T), c0)


def riccati_rhs(co: Coefficients, tau: float, h: np.ndarray) -> np.ndarray:
    lin = co.linear(tau)
    lh = lin @ h
    return -h @ co.q @ h + lh + lh.T + co.source(tau)


def g_rhs(co: Coefficients, tau: float, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    return (co.linear(tau) - h @ co.q) @ g - h @ co.s + co.g_forcing(tau)


def f_rhs(co: Coefficients, h: np.ndarray, g: np.ndarray) -> float:
    return co.f0 + 0.5 * g @ co.q @ g + co.s @ g - 0.5 * np.trace(co.model.sigma_z @ h)


def _hermite(y0, y1, d0, d1, h, theta):
    """Cubic Hermite interpolant on one cell, value and derivative."""
    t2, t3 = theta * theta, theta * theta * theta
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + theta
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    val = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
    dh00 = (6 * t2 - 6 * theta) / h
    dh10 = 3 * t2 - 4 * theta + 1
    dh01 = (-6 * t2 + 6 * theta) / h
    dh11 = 3 * t2 - 2 * theta
    der = dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1
    return val, der


@dataclass(frozen=True, eq=False)
class OdeSolution:
    """Grid solution of ``(H, g, f)`` with derivatives for Hermite interpolation.

    ``g``, ``f`` and their derivatives are ``None`` on a partial (H-only)
    solution.
    """

    model: DerivedModel
    variant: Variant
    gamma: float
    tau_grid: np.ndarray
    h: np.ndarray
    dh: np.ndarray
    g: np.ndarray | None = None
    dg: np.ndarray | None = None
    f: np.ndarray | None = None
    df: np.ndarray | None = None

    @property
    def horizon(self) -> float:
        return float(self.tau_grid[-1])

    @property
    def complete(self) -> bool:
        return self.g is not None and self.f is not None

    def _locate(self, tau: float):
        grid = self.tau_grid
        if not (-1e-14 <= tau <= grid[-1] * (1 + 1e-14)):
            raise ValueError(f"tau={tau} outside [0, {grid[-1]}]")
        tau = min(max(tau, 0.0), grid[-1])
        k = int(np.searchsorted(grid, tau, side="right") - 1)
        k = min(max(k, 0), len(grid) - 2)
        step = grid[k + 1] - grid[k]
        return k, step, (tau - grid[k]) / step

    def _interp(self, y, dy, tau):
        k, step, theta = self._locate(tau)
        if theta == 0.0:
            return y[k], dy[k]
        if theta == 1.0:
            return y[k + 1], dy[k + 1]
        return _hermite(y[k], y[k + 1], dy[k], dy[k + 1], step, theta)

    def h_at(self, tau: float) -> np.ndarray:
        val, _ = self._interp(self.h, self.dh, tau)
        return 0.5 * (val + val.T)

    def g_at(self, tau: float) -> np.ndarray:
        self._require_complete()
        return self._interp(self.g, self.dg, tau)[0]

    def f_at(self, tau: float) -> float:
        self._require_complete()
        return float(self._interp(self.f, self.df, tau)[0])

    def at(self, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
        """``(f, g, H)`` at time-to-horizon ``tau``."""
        return self.f_at(tau), self.g_at(tau), self.h_at(tau)

    def derivatives_at(self, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
        """``(f', g', H')`` from the Hermite interpolant."""
        self._require_complete()
        _, df = self._interp(self.f, self.df, tau)
        _, dg = self._interp(self.g, self.dg, tau)
        _, dh = self._interp(self.h, self.dh, tau)
        return float(df), dg, 0.5 * (dh + dh.T)

    def _require_complete(self):
        if not self.complete:
            raise ValueError("solution carries H only; run solve_g and compute_f first")

    def midpoint_residual(self) -> float:
        """Largest ODE residual of the interpolant over all cell midpoints.

        Each residual is scaled by ``1 + max|rhs|`` of its equation so that
        the steep start of the flow (large ``H'`` near ``tau = 0`` when a
        maturity sits just past the horizon) is measured relative to its size.
        """
        self._require_complete()
        co = coefficients(self.model, self.gamma, self.variant)
        grid = self.tau_grid
        worst = 0.0
        for k in range(len(grid) - 1):
            step = grid[k + 1] - grid[k]
            tau = grid[k] + 0.5 * step
            hv, hd = _hermite(self.h[k], self.h[k + 1], self.dh[k], self.dh[k + 1], step, 0.5)
            gv, gd = _hermite(self.g[k], self.g[k + 1], self.dg[k], self.dg[k + 1], step, 0.5)
            fv, fd = _hermite(self.f[k], self.f[k + 1], self.df[k], self.df[k + 1], step, 0.5)
            for der, rhs in (
                (hd, riccati_rhs(co, tau, hv)),
                (gd, g_rhs(co, tau, hv, gv)),
                (fd, f_rhs(co, hv, gv)),
            ):
                err = np.max(np.abs(der - rhs)) / (1.0 + np.max(np.abs(rhs)))
                worst = max(worst, float(err))
        return worst


def _grid(horizon: float, n_steps: int) -> np.ndarray:
    if int(n_steps) != n_steps or n_steps < 2:
        raise ValueError(f"n_steps must be an integer >= 2, got {n_steps}")
    grid = np.linspace(0.0, horizon, int(n_steps) + 1)
    grid[-1] = horizon
    return grid


def _gamma_of(prefs) -> float:
    return prefs.gamma if isinstance(prefs, Preferences) else Preferences(prefs).gamma


def solve_h(model: DerivedModel, prefs: Preferences, variant, n_steps: int = DEFAULT_STEPS) -> OdeSolution:
    """Integrate the symmetric Riccati flow with classical RK4.

    Raises :class:`NumericalFailure` when ``H`` becomes non-finite, exceeds
    ``BLOWUP_NORM`` or, for ``gamma > 1``, leaves the positive semidefinite
    cone.  For ``gamma < 1`` (sweeps only) ``H`` is expected to be negative
    semidefinite and only blow-up is checked.
    """
    gamma = _gamma_of(prefs)
    co = coefficients(model, gamma, variant)
    grid = _grid(model.horizon, n_steps)
    n = model.n
    hs = np.zeros((len(grid), n, n))
    dhs = np.zeros_like(hs)
    h = np.zeros((n, n))
    rhs = lambda tau, y: riccati_rhs(co, tau, y)  # noqa: E731
    dhs[0] = rhs(0.0, h)
    sign = 1.0 if gamma >= 1 else -1.0
    for k in range(len(grid) - 1):
        tau, step = grid[k], grid[k + 1] - grid[k]
        k1 = dhs[k]
        k2 = rhs(tau + 0.5 * step, h + 0.5 * step * k1)
        k3 = rhs(tau + 0.5 * step, h + 0.5 * step * k2)
        k4 = rhs(tau + step, h + step * k3)
        h = h + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        h = 0.5 * (h + h.T)
        tau_next = grid[k + 1]
        norm = float(np.max(np.abs(h))) if np.all(np.isfinite(h)) else np.inf
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise NumericalFailure("Riccati solution blew up", tau_next)
        w = np.linalg.eigvalsh(sign * h)
        if w[0] < -PSD_RTOL * max(norm, 1e-300) and norm > 0:
            raise NumericalFailure("Riccati solution lost semidefiniteness", tau_next)
        hs[k + 1] = h
        dhs[k + 1] = rhs(tau_next, h)
    return OdeSolution(model, co.variant, gamma, grid, hs, dhs)


def solve_g(model: DerivedModel, prefs: Preferences, variant, h_solution: OdeSolution) -> OdeSolution:
    """Integrate the linear g-equation with RK4, taking ``H`` from ``h_solution``."""
    gamma = _gamma_of(prefs)
    co = coefficients(model, gamma, variant)
    if h_solution.variant is not co.variant or h_solution.gamma != gamma:
        raise ValueError("h_solution was computed for a different variant or gamma")
    grid = h_solution.tau_grid
    n = model.n
    gs = np.zeros((len(grid), n))
    dgs = np.zeros_like(gs)
    g = np.zeros(n)
    dgs[0] = g_rhs(co, 0.0, h_solution.h[0], g)
    for k in range(len(grid) - 1):
        tau, step = grid[k], grid[k + 1] - grid[k]
        h_mid, _ = _hermite(h_solution.h[k], h_solution.h[k + 1], h_solution.dh[k], h_solution.dh[k + 1], step, 0.5)
        k1 = dgs[k]
        k2 = g_rhs(co, tau + 0.5 * step, h_mid, g + 0.5 * step * k1)
        k3 = g_rhs(co, tau + 0.5 * step, h_mid, g + 0.5 * step * k2)
        k4 = g_rhs(co, tau + step, h_solution.h[k + 1], g + step * k3)
        g = g + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        gs[k + 1] = g
        dgs[k + 1] = g_rhs(co, grid[k + 1], h_solution.h[k + 1], g)
    return OdeSolution(model, co.variant, gamma, grid, h_solution.h, h_solution.dh, gs, dgs)


def compute_f(model: DerivedModel, prefs: Preferences, variant, h_solution: OdeSolution, g_solution: OdeSolution) -> OdeSolution:
    """Cumulative composite-Simpson quadrature of the f-integrand.

    Each cell uses its two endpoints and its Hermite-interpolated midpoint, so
    ``f`` is available at every grid point with fourth-order accuracy.
    """
    gamma = _gamma_of(prefs)
    co = coefficients(model, gamma, variant)
    if g_solution.g is None:
        raise ValueError("g_solution carries no g")
    grid = g_solution.tau_grid
    hs, dhs, gs, dgs = h_solution.h, h_solution.dh, g_solution.g, g_solution.dg
    vals = np.array([f_rhs(co, hs[k], gs[k]) for k in range(len(grid))])
    fs = np.zeros(len(grid))
    for k in range(len(grid) - 1):
        step = grid[k + 1] - grid[k]
        hm, _ = _hermite(hs[k], hs[k + 1], dhs[k], dhs[k + 1], step, 0.5)
        gm, _ = _hermite(gs[k], gs[k + 1], dgs[k], dgs[k + 1], step, 0.5)
        mid = f_rhs(co, hm, gm)
        fs[k + 1] = fs[k] + step / 6.0 * (vals[k] + 4.0 * mid + vals[k + 1])
    return OdeSolution(model, co.variant, gamma, grid, hs, dhs, gs, dgs, fs, vals)


def solve(model: DerivedModel, prefs: Preferences, variant, n_steps: int = DEFAULT_STEPS) -> OdeSolution:
    """Full ``(H, g, f)`` solution for one problem variant."""
    hsol = solve_h(model, prefs, variant, n_steps)
    gsol = solve_g(model, prefs, variant, hsol)
    return compute_f(model, prefs, variant, hsol, gsol)


def to_table(sol: OdeSolution) -> tuple[list[str], np.ndarray]:
    """Header and rows for CSV export: ``tau, f, g_1..g_N, h_11..h_NN``."""
    n = sol.model.n
    rows = len(sol.tau_grid)
    header = ["tau", "f"] + [f"g_{i + 1}" for i in range(n)] + [
        f"h_{i + 1}{j + 1}" for i in range(n) for j in range(n)
    ]
    f = sol.f if sol.f is not None else np.full(rows, np.nan)
    g = sol.g if sol.g is not None else np.full((rows, n), np.nan)
    return header, np.column_stack([sol.tau_grid, f, g, sol.h.reshape(rows, -1)])
