"""Value function, certainty equivalent and optimal feedback positions.

All evaluators accept ``z`` of shape ``(N,)`` or any batch ``(..., N)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .odesolve import OdeSolution, Variant
from .simulate import ConfidenceRegion, confidence_region

__all__ = [
    "value",
    "certainty_equivalent",
    "exponent",
    "futures_strategy",
    "full_strategy",
    "strategy_coefficients",
    "CeExtremes",
    "ce_extremes",
    "region_grid",
]


def _check(sol: OdeSolution, t: float, x=None) -> float:
    if not sol.complete:
        raise ValueError("solution is incomplete (H only)")
    if sol.gamma <= 1:
        raise ValueError(f"policy evaluation requires gamma > 1, got {sol.gamma}")
    T = sol.horizon
    if not (0 <= t <= T):
        raise ValueError(f"t must lie in [0, T={T}], got {t}")
    if x is not None and np.any(np.asarray(x) <= 0):
        raise ValueError("wealth x must be positive")
    return T - t


def exponent(sol: OdeSolution, t: float, z) -> np.ndarray:
    """``f + z.g - z.H z / 2`` at time-to-horizon ``T - t``."""
    tau = _check(sol, t)
    f, g, h = sol.at(tau)
    z = np.asarray(z, dtype=float)
    return f + z @ g - 0.5 * np.einsum("...i,ij,...j->...", z, h, z)


def value(sol: OdeSolution, t: float, x, z) -> np.ndarray:
    """Optimal expected utility ``V(t, x, z)``."""
    _check(sol, t, x)
    g = sol.gamma
    x = np.asarray(x, dtype=float)
    return x ** (1 - g) / (1 - g) * np.exp(g * exponent(sol, t, z))


def certainty_equivalent(sol: OdeSolution, t: float, x, z) -> np.ndarray:
    """Deterministic terminal wealth with the same utility as ``V(t, x, z)``."""
    _check(sol, t, x)
    g = sol.gamma
    return np.asarray(x, dtype=float) * np.exp(g / (1 - g) * exponent(sol, t, z))


def strategy_coefficients(sol: OdeSolution, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit-wealth positions ``const + slope @ z`` at time ``t``.

    Returns ``const`` of shape ``(d,)`` and ``slope`` of shape ``(d, N)`` with
    ``d = N`` (futures only) or ``d = 2N`` (futures then spot).
    """
    tau = _check(sol, t)
    model = sol.model
    gam = sol.gamma
    _, g, h = sol.at(tau)
    if sol.variant is Variant.FUTURES_ONLY:
        sf_inv, b = model.sigma_f_inv, model.b_mat
        const = sf_inv @ model.params.mu_f / gam + b @ g
        slope = sf_inv @ np.diag(model.eta_f_diag(t)) / gam - b @ h
    else:
        s_inv, c = model.sigma_inv, model.c_mat
        const = s_inv @ model.mu / gam + c @ g
        slope = s_inv @ model.eta(t) / gam - c @ h
    return const, slope


def _positions(sol, t, x, z):
    _check(sol, t, x)
    const, slope = strategy_coefficients(sol, t)
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    return x[..., None] * (const + z @ slope.T)


def futures_strategy(sol: OdeSolution, t: float, x, z) -> np.ndarray:
    """Optimal futures notionals when only futures are traded."""
    if sol.variant is not Variant.FUTURES_ONLY:
        raise ValueError("futures_strategy needs a futures-only solution")
    return _positions(sol, t, x, z)


def full_strategy(sol: OdeSolution, t: float, x, z) -> tuple[np.ndarray, np.ndarray]:
    """Optimal ``(theta, pi)``: futures notionals and spot cash positions."""
    if sol.variant is not Variant.FULL_MARKET:
        raise ValueError("full_strategy needs a full-market solution")
    pos = _positions(sol, t, x, z)
    n = sol.model.n
    return pos[..., :n], pos[..., n:]


def region_grid(region: ConfidenceRegion, resolution: int = 201) -> np.ndarray:
    """Points of a ``resolution x resolution`` box grid that fall inside a 2-D region."""
    if region.center.shape[0] != 2:
        raise ValueError("grid search is only defined for N = 2")
    lo, hi = region.bounding_box()
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(2)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    return pts[region.contains(pts)]


def _ellipsoid_samples(region: ConfidenceRegion, n_points: int, seed: int) -> np.ndarray:
    """Quasi-random points on the boundary of an ellipsoid of any dimension."""
    dim = region.center.shape[0]
    u = qmc.Sobol(d=dim, scramble=True, seed=seed).random(n_points)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    dirs = ndtri(u)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    chol = np.linalg.cholesky(region.cov)
    return region.center + np.sqrt(region.radius2) * dirs @ chol.T


@dataclass(frozen=True)
class CeExtremes:
    t: float
    ce_min: float
    ce_max: float
    argmin: np.ndarray
    argmax: np.ndarray
    n_points: int


def ce_extremes(
    sol: OdeSolution,
    t: float,
    x: float = 1.0,
    z0=0.0,
    level: float = 0.95,
    resolution: int = 201,
    region: Optional[ConfidenceRegion] = None,
    n_boundary: int = 2**14,
) -> CeExtremes:
    """Min and max of ``CE(t, x, z)`` over the confidence region of ``Z_t``.

    For two assets this is a dense grid search over the region's bounding box.
    For other sizes the maximum is searched on ``n_boundary`` quasi-random
    boundary points (the exponent is concave, so the maximum CE lies on the
    boundary) and the minimum additionally considers the interior stationary
    point; this is exact for the minimum and approximate for the maximum.
    """
    if region is None:
        region = confidence_region(sol.model, t, z0, level)
    if sol.model.n == 2:
        pts = region_grid(region, resolution)
        pts = np.vstack([pts, region.center[None, :]])
    else:
        pts = _ellipsoid_samples(region, n_boundary, seed=0)
        _, g, h = sol.at(sol.horizon - t)
        extra = [region.center]
        try:
            stat = np.linalg.solve(h, g)
            if region.contains(stat):
                extra.append(stat)
        except np.linalg.LinAlgError:
            pass
        pts = np.vstack([pts, np.array(extra)])
    ce = certainty_equivalent(sol, t, x, pts)
    i_min, i_max = int(np.argmin(ce)), int(np.argmax(ce))
    return CeExtremes(float(t), float(ce[i_min]), float(ce[i_max]), pts[i_min], pts[i_max], len(pts))
