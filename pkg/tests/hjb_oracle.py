"""Independent HJB check built only from the market dynamics.

For a value function ``V = x^(1-gamma)/(1-gamma) exp(gamma psi(t, z))`` the
supremum over positions ``u`` of the generator is a concave quadratic, so it
is maximized by one linear solve.  Nothing here reuses the ODE coefficients.
"""

import numpy as np


def _selection(model, variant):
    n = model.n
    if variant == "futures":
        return np.hstack([np.eye(n), np.zeros((n, n))])
    return np.eye(2 * n)


def hjb_terms(sol, t, z, x=1.0):
    """Return the HJB residual, the sum of absolute term sizes and the maximizer ``u*``."""
    model = sol.model
    gam = sol.gamma
    n = model.n
    tau = model.horizon - t
    _, g, h = sol.at(tau)
    df, dg, dh = sol.derivatives_at(tau)
    z = np.asarray(z, dtype=float)

    psi_z = g - h @ z
    psi_zz = -h
    psi_t = -(df + z @ dg - 0.5 * z @ dh @ z)

    v = x ** (1 - gam) / (1 - gam) * np.exp(gam * sol.at(tau)[0] + gam * (z @ g - 0.5 * z @ h @ z))
    v_t = gam * v * psi_t
    v_x = (1 - gam) * v / x
    v_xx = -gam * (1 - gam) * v / x**2
    v_z = gam * v * psi_z
    v_zz = v * (gam**2 * np.outer(psi_z, psi_z) + gam * psi_zz)
    v_xz = (1 - gam) * gam * v * psi_z / x

    p = _selection(model, "futures" if sol.variant.value == "futures" else "full")
    sigma = model.sigma
    c = np.vstack([np.eye(n), -np.eye(n)])
    eta = np.vstack([np.diag(model.params.eta_f / (model.maturities - t)),
                     np.diag(model.params.eta_s / (model.maturities - t))])
    excess = np.concatenate([model.params.mu_f, model.params.mu_s - model.params.rate]) + eta @ z
    r = model.params.rate
    drift_z = model.m - model.kappa / (model.maturities - t) * z
    sig_z = c.T @ sigma @ c

    a = v_x * (p @ excess) + p @ sigma @ c @ v_xz
    quad = v_xx * (p @ sigma @ p.T)
    u = -np.linalg.solve(quad, a)

    terms = [
        v_t,
        r * x * v_x,
        a @ u + 0.5 * u @ quad @ u,
        drift_z @ v_z,
        0.5 * np.trace(sig_z @ v_zz),
    ]
    return float(sum(terms)), float(sum(abs(s) for s in terms)), u
