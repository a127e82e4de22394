"""Market parameters for the stopped-bridge basis model and everything derived from them.

The market holds ``N`` futures/spot pairs.  The log-basis of pair ``i``,
``Z_i = log(F_i / S_i) - r (T_i - t)``, is a scaled Brownian bridge pinned to
zero at the futures maturity ``T_i`` but observed only up to the trading
horizon ``T < min T_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

__all__ = [
    "MarketParams",
    "Preferences",
    "DerivedModel",
    "Violation",
    "InvalidParameters",
    "validate",
    "derive",
    "eta_of_t",
    "is_positive_definite",
    "block_cholesky",
]

# smallest eigenvalue must exceed this fraction of the largest
PD_RTOL = 1e-10


class InvalidParameters(ValueError):
    """Raised when market parameters violate the model's standing assumptions."""

    def __init__(self, violations: list["Violation"]):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(msg or "invalid parameters")


@dataclass(frozen=True)
class Violation:
    field: str
    value: Any
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message} (got {self.value!r})"


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MarketParams:
    """User-facing model inputs.

    Attributes:
        rate: Constant short rate ``r`` (annualized, continuous compounding).
        mu_f: Futures drifts, shape ``(N,)``.
        mu_s: Spot drifts, shape ``(N,)``.
        eta_f: Bridge coefficients of the futures drifts, shape ``(N,)``.
        eta_s: Bridge coefficients of the spot drifts, shape ``(N,)``.
        horizon: Trading horizon ``T`` in years.
        maturities: Futures delivery dates ``T_i`` in years, shape ``(N,)``.
        sigma: ``2N x 2N`` instantaneous covariance with block layout
            ``[[Sigma_F, Sigma_FS], [Sigma_FS^T, Sigma_S]]``.
    """

    rate: float
    mu_f: np.ndarray
    mu_s: np.ndarray
    eta_f: np.ndarray
    eta_s: np.ndarray
    horizon: float
    maturities: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("mu_f", "mu_s", "eta_f", "eta_s", "maturities"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1))
        object.__setattr__(self, "sigma", _frozen(self.sigma, 2))
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def n_assets(self) -> int:
        return int(self.mu_f.shape[0])

    def replace(self, **changes) -> "MarketParams":
        kw = {name: getattr(self, name) for name in self.__dataclass_fields__}
        kw.update(changes)
        return MarketParams(**kw)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MarketParams":
        """Build from a config mapping.

        ``sigma`` may be given either as a full ``2N x 2N`` nested list or as a
        mapping with blocks ``sigma_f``, ``sigma_s`` and ``sigma_fs``.
        """
        d = dict(d)
        sig = d.pop("sigma")
        if isinstance(sig, Mapping):
            sf = np.asarray(sig["sigma_f"], dtype=float)
            ss = np.asarray(sig["sigma_s"], dtype=float)
            sfs = np.asarray(sig["sigma_fs"], dtype=float)
            sig = np.block([[sf, sfs], [sfs.T, ss]])
        n = d.pop("n_assets", None)
        params = cls(sigma=sig, **d)
        if n is not None and int(n) != params.n_assets:
            raise InvalidParameters(
                [Violation("n_assets", n, f"does not match length of mu_f ({params.n_assets})")]
            )
        return params

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_assets": self.n_assets,
            "rate": self.rate,
            "mu_f": self.mu_f.tolist(),
            "mu_s": self.mu_s.tolist(),
            "eta_f": self.eta_f.tolist(),
            "eta_s": self.eta_s.tolist(),
            "horizon": self.horizon,
            "maturities": self.maturities.tolist(),
            "sigma": self.sigma.tolist(),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, MarketParams):
            return NotImplemented
        return self.rate == other.rate and self.horizon == other.horizon and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("mu_f", "mu_s", "eta_f", "eta_s", "maturities", "sigma")
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Preferences:
    """CRRA preferences with relative risk aversion ``gamma``.

    Only ``gamma > 1`` is a supported preference.  ``allow_nirvana=True`` lets
    sensitivity sweeps probe ``gamma <= 1`` where the Riccati flow may blow up;
    policy evaluation refuses such solutions.
    """

    gamma: float
    allow_nirvana: bool = False

    def __post_init__(self):
        g = float(self.gamma)
        object.__setattr__(self, "gamma", g)
        if not np.isfinite(g) or g <= 0:
            raise InvalidParameters([Violation("gamma", g, "must be positive and finite")])
        if g <= 1 and not self.allow_nirvana:
            raise InvalidParameters([Violation("gamma", g, "must be > 1")])


def is_positive_definite(mat: np.ndarray, rtol: float = PD_RTOL) -> bool:
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        return False
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    return bool(w[-1] > 0 and w[0] > rtol * w[-1])


def validate(params: MarketParams) -> list[Violation]:
    """Return every violated standing assumption; an empty list means valid."""
    out: list[Violation] = []
    n = params.n_assets
    if n < 1:
        out.append(Violation("n_assets", n, "must be >= 1"))
        return out
    for name in ("mu_s", "eta_f", "eta_s", "maturities"):
        arr = getattr(params, name)
        if arr.shape != (n,):
            out.append(Violation(name, arr.shape, f"must have shape ({n},)"))
    if params.sigma.shape != (2 * n, 2 * n):
        out.append(Violation("sigma", params.sigma.shape, f"must have shape ({2 * n}, {2 * n})"))
    if out:
        return out

    for name in ("rate", "horizon"):
        v = getattr(params, name)
        if not np.isfinite(v):
            out.append(Violation(name, v, "must be finite"))
    for name in ("mu_f", "mu_s", "eta_f", "eta_s", "maturities", "sigma"):
        if not np.all(np.isfinite(getattr(params, name))):
            out.append(Violation(name, getattr(params, name).tolist(), "must be finite"))
    if out:
        return out

    if params.rate < 0:
        out.append(Violation("rate", params.rate, "must be >= 0"))
    if params.horizon <= 0:
        out.append(Violation("horizon", params.horizon, "must be > 0"))
    tmin = float(params.maturities.min())
    if params.horizon >= tmin:
        out.append(
            Violation("horizon", params.horizon, f"horizon >= min maturity ({tmin}); trading must stop before expiry")
        )
    kappa = params.eta_s - params.eta_f
    bad = np.flatnonzero(kappa <= 0)
    if bad.size:
        out.append(
            Violation("eta_f", params.eta_f.tolist(), f"kappa must be positive (eta_f < eta_s fails at index {bad.tolist()})")
        )
    sig = params.sigma
    if not np.allclose(sig, sig.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sig).max())):
        out.append(Violation("sigma", sig.tolist(), "must be symmetric"))
    elif not is_positive_definite(sig):
        out.append(Violation("sigma", sig.tolist(), "must be positive definite"))
    return out


def block_cholesky(sigma: np.ndarray, n: int) -> np.ndarray:
    """Factor ``sigma = L L^T`` with a zero upper-right ``n x n`` block.

    The futures block is factored first; the spot block factors the Schur
    complement ``Sigma_S - Sigma_FS^T Sigma_F^{-1} Sigma_FS``.
    """
    sf, sfs, ss = sigma[:n, :n], sigma[:n, n:], sigma[n:, n:]
    lf = np.linalg.cholesky(sf)
    # L_SF = Sigma_FS^T L_F^{-T}
    lsf = np.linalg.solve(lf, sfs).T
    schur = ss - lsf @ lsf.T
    ls = np.linalg.cholesky(0.5 * (schur + schur.T))
    out = np.zeros_like(sigma, dtype=float)
    out[:n, :n] = lf
    out[n:, :n] = lsf
    out[n:, n:] = ls
    return out


@dataclass(frozen=True, eq=False)
class DerivedModel:
    """Matrices and coefficients derived from :class:`MarketParams`."""

    params: MarketParams
    sigma_f: np.ndarray
    sigma_s: np.ndarray
    sigma_fs: np.ndarray
    sigma_tilde: np.ndarray
    sigma_z: np.ndarray
    m: np.ndarray
    kappa: np.ndarray
    a_mat: np.ndarray
    b_mat: np.ndarray
    c_mat: np.ndarray
    vol_f: np.ndarray
    vol_s: np.ndarray
    mu: np.ndarray = field(repr=False)
    sigma_f_inv: np.ndarray = field(repr=False)
    sigma_inv: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.params.n_assets

    @property
    def horizon(self) -> float:
        return self.params.horizon

    @property
    def maturities(self) -> np.ndarray:
        return self.params.maturities

    @property
    def sigma(self) -> np.ndarray:
        return self.params.sigma

    def eta_f_diag(self, t: float) -> np.ndarray:
        """Diagonal entries of ``eta_F(t)``."""
        return self.params.eta_f / (self.params.maturities - t)

    def eta_s_diag(self, t: float) -> np.ndarray:
        return self.params.eta_s / (self.params.maturities - t)

    def eta(self, t: float) -> np.ndarray:
        return eta_of_t(self, t)


def derive(params: MarketParams, check: bool = True) -> DerivedModel:
    """Compute every derived matrix.

    ``check=False`` skips :func:`validate`; tests use it for degenerate
    fixtures such as vanishing bridge coefficients.
    """
    if check:
        problems = validate(params)
        if problems:
            raise InvalidParameters(problems)
    n = params.n_assets
    sig = params.sigma
    sf, sfs, ss = sig[:n, :n].copy(), sig[:n, n:].copy(), sig[n:, n:].copy()
    try:
        st = block_cholesky(sig, n)
    except np.linalg.LinAlgError as exc:
        raise InvalidParameters([Violation("sigma", sig.tolist(), f"factorization failed: {exc}")]) from exc

    sf_inv = np.linalg.inv(sf)
    sf_inv = 0.5 * (sf_inv + sf_inv.T)
    s_inv = np.linalg.inv(sig)
    s_inv = 0.5 * (s_inv + s_inv.T)
    eye = np.eye(n)
    c = np.vstack([eye, -eye])
    sz = sf + ss - sfs - sfs.T
    a = sf + sfs.T @ sf_inv @ sfs - sfs - sfs.T
    b = eye - sf_inv @ sfs
    vol_f = np.sqrt(np.diag(sf))
    vol_s = np.sqrt(np.diag(ss))
    m = params.rate + params.mu_f - params.mu_s - 0.5 * (vol_f**2 - vol_s**2)
    kappa = params.eta_s - params.eta_f
    mu = np.concatenate([params.mu_f, params.mu_s - params.rate])

    arrays = dict(
        sigma_f=sf, sigma_s=ss, sigma_fs=sfs, sigma_tilde=st, sigma_z=0.5 * (sz + sz.T),
        m=m, kappa=kappa, a_mat=0.5 * (a + a.T), b_mat=b, c_mat=c, vol_f=vol_f, vol_s=vol_s,
        mu=mu, sigma_f_inv=sf_inv, sigma_inv=s_inv,
    )
    for v in arrays.values():
        v.setflags(write=False)
    return DerivedModel(params=params, **arrays)


def eta_of_t(model: DerivedModel, t: float) -> np.ndarray:
    """Stacked ``2N x N`` bridge-coefficient matrix ``[eta_F(t); eta_S(t)]``."""
    tm = model.maturities
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if np.any(t >= tm):
        raise ValueError(f"bridge coefficient singular at maturity: t={t} >= min maturity {tm.min()}")
    return np.vstack([np.diag(model.eta_f_diag(t)), np.diag(model.eta_s_diag(t))])
