"""Exact-law simulation of the log-bases, spot and futures prices.

The log-basis is linear in its driving noise, so after rescaling by
``(T_i / (T_i - t))**kappa_i`` it becomes a Gaussian random walk with
time-varying drift and covariance.  Every quantity below is an exact
transition law on the grid ``t_n = n T / M``, not an Euler approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

from .model import DerivedModel
from .quadrature import gauss_legendre

__all__ = [
    "DiscretizationTables",
    "PathSet",
    "UnsupportedConfiguration",
    "build_tables",
    "simulate_z",
    "simulate_joint",
    "z_moments",
    "confidence_region",
    "ConfidenceRegion",
    "path_rng",
    "psd_sqrt",
    "pow_integral",
]

QUAD_RTOL = 1e-10


class UnsupportedConfiguration(ValueError):
    pass


def pow_integral(tm, k, a, b):
    """``int_a^b (tm / (tm - s))**k ds`` in closed form, for ``b < tm``.

    Written through ``exprel`` so the ``k = 1`` (logarithmic) case is the
    continuous limit of the general branch.
    """
    tm, k, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (tm, k, a, b)))
    log_ratio = np.log((tm - b) / (tm - a))  # <= 0
    return tm * (tm / (tm - a)) ** (k - 1) * (-log_ratio) * special.exprel((1 - k) * log_ratio)


def _decay_integral(tm, k, t):
    """``int_0^t ((tm - t) / (tm - u))**k du``; zero when ``t >= tm``."""
    tm, k, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (tm, k, t)))
    out = np.zeros(tm.shape)
    live = t < tm
    rem = tm[live] - t[live]
    log_ratio = np.log(rem / tm[live])
    out[live] = rem * (-log_ratio) * special.exprel((k[live] - 1) * log_ratio)
    return out


def psd_sqrt(cov: np.ndarray, clip: float = 1e-12) -> np.ndarray:
    """Symmetric square root of a covariance, clipping round-off negatives.

    Eigenvalues below ``-clip * max(1, largest)`` are treated as a genuine
    loss of semidefiniteness.
    """
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(cov)
    floor = -clip * np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))
    if np.any(w < floor):
        raise np.linalg.LinAlgError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


@dataclass(frozen=True, eq=False)
class DiscretizationTables:
    """Per-step coefficients of the exact scheme on ``M`` equal steps.

    ``phi[n-1]`` and ``cov_z[n-1]`` belong to the step ``t_{n-1} -> t_n``;
    ``scale[n]`` is the rescaling factor at ``t_n``.
    """

    model: DerivedModel
    horizon: float
    n_steps: int
    times: np.ndarray
    phi: np.ndarray
    scale: np.ndarray
    cov_z: np.ndarray
    cov_s: np.ndarray
    cov_sz: np.ndarray

    def joint_cov(self, n: int) -> np.ndarray:
        """``2N x 2N`` covariance of ``(e_S, e_Z)`` on step ``n`` (0-based)."""
        return np.block([[self.cov_s, self.cov_sz[n]], [self.cov_sz[n].T, self.cov_z[n]]])


def build_tables(model: DerivedModel, n_steps: int, horizon: Optional[float] = None) -> DiscretizationTables:
    """Tabulate drift coefficients and innovation covariances for ``n_steps`` steps.

    Diagonal innovation variances (and any pair sharing a maturity) use the
    closed-form antiderivative; other entries use adaptive Gauss-Legendre.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    T = model.horizon if horizon is None else float(horizon)
    tm, kap = model.maturities, model.kappa
    if T <= 0 or T >= tm.min():
        raise ValueError(f"horizon must lie in (0, min maturity), got {T}")
    n = model.n
    times = np.arange(n_steps + 1) * (T / n_steps)
    times[-1] = T
    lo, hi = times[:-1, None], times[1:, None]

    phi = pow_integral(tm[None, :], kap[None, :], lo, hi)
    scale = (tm[None, :] / (tm[None, :] - times[:, None])) ** kap[None, :]

    beta = model.sigma_z
    cov_z = np.empty((n_steps, n, n))
    same = np.isclose(tm[:, None], tm[None, :], rtol=0, atol=0)
    ksum = kap[:, None] + kap[None, :]
    ii, jj = np.nonzero(same)
    for step in range(n_steps):
        a, b = times[step], times[step + 1]
        block = np.empty((n, n))
        block[ii, jj] = pow_integral(tm[ii], ksum[ii, jj], a, b)
        if not same.all():

            def integrand(s):
                w = (tm[:, None] / (tm[:, None] - s[None, :])) ** kap[:, None]
                return w[:, None, :] * w[None, :, :]

            full = gauss_legendre(integrand, a, b, rtol=QUAD_RTOL)
            block[~same] = full[~same]
        cov_z[step] = beta * block
    cov_z = 0.5 * (cov_z + np.swapaxes(cov_z, 1, 2))

    dt = T / n_steps
    cov_s = dt * model.sigma_s
    cross = model.sigma_fs.T - model.sigma_s
    cov_sz = cross[None, :, :] * phi[:, None, :]

    for arr in (times, phi, scale, cov_z, cov_s, cov_sz):
        arr.setflags(write=False)
    return DiscretizationTables(model, T, n_steps, times, phi, scale, cov_z, cov_s, cov_sz)


@dataclass(frozen=True, eq=False)
class PathSet:
    """Simulated trajectories on the grid ``times``; arrays are ``(paths, M+1, N)``.

    ``s`` and ``f`` are ``None`` for log-basis-only simulations.
    """

    times: np.ndarray
    z: np.ndarray
    s: Optional[np.ndarray]
    f: Optional[np.ndarray]
    seed: int
    model: Optional[DerivedModel] = None
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.z.shape[0]

    @property
    def n_steps(self) -> int:
        return self.z.shape[1] - 1

    def subsample(self, every: int) -> "PathSet":
        """Keep every ``every``-th grid point.

        The scheme is exact, so the result has the exact law on the coarser
        grid; this gives common random numbers across rebalancing frequencies.
        """
        every = int(every)
        if every < 1 or self.n_steps % every:
            raise ValueError(f"step count {self.n_steps} is not divisible by {every}")
        pick = slice(None, None, every)
        s = None if self.s is None else self.s[:, pick]
        f = None if self.f is None else self.f[:, pick]
        return PathSet(self.times[pick], self.z[:, pick], s, f, self.seed, self.model, self.path_offset)

    def identity_residual(self) -> np.ndarray:
        """``log F - Z - log S - r (T_i - t)``; zero up to round-off."""
        if self.s is None or self.f is None or self.model is None:
            raise ValueError("identity needs spot, futures and the generating model")
        tau = self.model.maturities[None, None, :] - self.times[None, :, None]
        return np.log(self.f) - self.z - np.log(self.s) - self.model.params.rate * tau


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Independent counter-based stream for one path.

    Equivalent to the ``path``-th child of ``SeedSequence(seed).spawn``, so a
    path's draws do not depend on how paths are batched or parallelized.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(int(path),))))


def _draw(seed: int, n_paths: int, n_steps: int, dim: int, path_offset: int) -> np.ndarray:
    out = np.empty((n_paths, n_steps, dim))
    for p in range(n_paths):
        out[p] = path_rng(seed, path_offset + p).standard_normal((n_steps, dim))
    return out


def _check_tables(model: DerivedModel, tables: DiscretizationTables) -> None:
    if tables.model is not model and tables.model.params != model.params:
        raise ValueError("tables were built for a different model")


def _z_recursion(model, tables, z0, e_z):
    n_paths = e_z.shape[0]
    z = np.empty((n_paths, tables.n_steps + 1, model.n))
    z[:, 0] = z0
    y = z0 * tables.scale[0]
    for step in range(tables.n_steps):
        y = y + tables.phi[step] * model.m + e_z[:, step]
        z[:, step + 1] = y / tables.scale[step + 1]
    return z


def simulate_z(
    model: DerivedModel,
    tables: DiscretizationTables,
    z0,
    n_paths: int,
    seed: int,
    path_offset: int = 0,
) -> PathSet:
    """Simulate log-basis paths only."""
    _check_tables(model, tables)
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), (model.n,))
    xi = _draw(seed, n_paths, tables.n_steps, model.n, path_offset)
    roots = psd_sqrt(tables.cov_z)
    e_z = np.einsum("smk,mjk->smj", xi, roots)
    z = _z_recursion(model, tables, z0, e_z)
    return PathSet(tables.times, z, None, None, int(seed), model, path_offset)


def simulate_joint(
    model: DerivedModel,
    tables: DiscretizationTables,
    s0,
    z0,
    n_paths: int,
    seed: int,
    path_offset: int = 0,
) -> PathSet:
    """Simulate spot, futures and log-basis paths jointly.

    Requires ``eta_s == 0`` so that spot prices are geometric Brownian motions.
    """
    _check_tables(model, tables)
    if np.any(model.params.eta_s != 0):
        raise UnsupportedConfiguration(
            "joint (S, F, Z) simulation assumes eta_s = 0 (spot prices are geometric Brownian motions)"
        )
    n = model.n
    s0 = np.broadcast_to(np.asarray(s0, dtype=float), (n,))
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), (n,))
    if np.any(s0 <= 0):
        raise ValueError("s0 must be positive")
    joint = np.stack([tables.joint_cov(k) for k in range(tables.n_steps)])
    roots = psd_sqrt(joint)
    xi = _draw(seed, n_paths, tables.n_steps, 2 * n, path_offset)
    e = np.einsum("smk,mjk->smj", xi, roots)
    e_s, e_z = e[..., :n], e[..., n:]

    z = _z_recursion(model, tables, z0, e_z)
    dt = tables.horizon / tables.n_steps
    drift = dt * (model.params.mu_s - 0.5 * model.vol_s**2)
    log_s = np.empty_like(z)
    log_s[:, 0] = np.log(s0)
    log_s[:, 1:] = np.log(s0) + np.cumsum(drift + e_s, axis=1)
    carry = model.params.rate * (model.maturities[None, None, :] - tables.times[None, :, None])
    log_f = z + log_s + carry
    return PathSet(tables.times, z, np.exp(log_s), np.exp(log_f), int(seed), model, path_offset)


def _phi_t(model: DerivedModel, t: float) -> np.ndarray:
    return _decay_integral(model.maturities, model.kappa, t)


def _cov_t(model: DerivedModel, t: float) -> np.ndarray:
    tm, kap = model.maturities, model.kappa
    n = model.n
    if t == 0:
        return np.zeros((n, n))
    same = tm[:, None] == tm[None, :]
    ksum = kap[:, None] + kap[None, :]
    ii, jj = np.nonzero(same)
    block = np.empty((n, n))
    block[ii, jj] = _decay_integral(tm[ii], ksum[ii, jj], t)
    if not same.all():
        rem = np.clip(tm - t, 0.0, None)

        def integrand(u):
            w = (rem[:, None] / (tm[:, None] - u[None, :])) ** kap[:, None]
            return w[:, None, :] * w[None, :, :]

        full = gauss_legendre(integrand, 0.0, t, rtol=QUAD_RTOL)
        block[~same] = full[~same]
    cov = model.sigma_z * block
    return 0.5 * (cov + cov.T)


def _moments(model: DerivedModel, t: float, z0) -> tuple[np.ndarray, np.ndarray]:
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), (model.n,))
    tm, kap = model.maturities, model.kappa
    decay = (np.clip(tm - t, 0.0, None) / tm) ** kap
    mean = decay * z0 + _phi_t(model, t) * model.m
    return mean, _cov_t(model, t)


def z_moments(model: DerivedModel, t: float, z0) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and covariance of ``Z_t`` given ``Z_0 = z0``."""
    if not 0 <= t <= model.horizon:
        raise ValueError(f"t must lie in [0, T={model.horizon}], got {t}")
    return _moments(model, t, z0)


@dataclass(frozen=True)
class ConfidenceRegion:
    """Ellipsoid ``{z : (z - center)^T shape (z - center) <= radius2}``."""

    center: np.ndarray
    shape: np.ndarray
    radius2: float
    cov: np.ndarray

    def quadratic_form(self, z) -> np.ndarray:
        d = np.asarray(z, dtype=float) - self.center
        return np.einsum("...i,ij,...j->...", d, self.shape, d)

    def contains(self, z) -> np.ndarray:
        return self.quadratic_form(z) <= self.radius2

    def boundary(self, n_points: int = 200) -> np.ndarray:
        """Points on the boundary ellipse (2-D regions only)."""
        if self.center.shape[0] != 2:
            raise ValueError("boundary tracing is only defined for N = 2")
        ang = np.linspace(0.0, 2 * np.pi, n_points)
        chol = np.linalg.cholesky(self.cov)
        circle = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return self.center + np.sqrt(self.radius2) * circle @ chol.T

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.sqrt(self.radius2 * np.diag(self.cov))
        return self.center - half, self.center + half


def confidence_region(model: DerivedModel, t: float, z0, level: float = 0.95) -> ConfidenceRegion:
    """Level-``level`` ellipsoid for ``Z_t | Z_0 = z0`` from the chi-squared law."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    mean, cov = z_moments(model, t, z0)
    if t == 0 or not np.all(np.linalg.eigvalsh(cov) > 0):
        raise ValueError(f"covariance of Z_t is singular at t={t}; use t > 0")
    shape = np.linalg.inv(cov)
    radius2 = float(stats.chi2.ppf(level, df=model.n))
    return ConfidenceRegion(mean, 0.5 * (shape + shape.T), radius2, cov)
