import numpy as np
import pytest

from futbasis import MarketParams, Preferences, derive, solve

SIGMA = [
    [1.0, 0.3, 0.7, 0.2],
    [0.3, 1.0, 0.1, 0.5],
    [0.7, 0.1, 1.0, 0.2],
    [0.2, 0.5, 0.2, 1.0],
]


def two_pair_params(**changes) -> MarketParams:
    """Two futures/spot pairs, nearer contract expiring just after the horizon."""
    base = dict(
        rate=0.01,
        mu_f=[0.12, 0.13],
        mu_s=[0.10, 0.15],
        eta_f=[-1.0, -1.5],
        eta_s=[0.0, 0.0],
        horizon=0.25,
        maturities=[0.27, 0.26],
        sigma=SIGMA,
    )
    base.update(changes)
    return MarketParams(**base)


def merton_ce(mu, sigma, rate, gamma, horizon):
    """Certainty equivalent of the constant-coefficient CRRA investor."""
    return float(np.exp(horizon * (rate + mu @ np.linalg.solve(sigma, mu) / (2 * gamma))))


@pytest.fixture(scope="session")
def params():
    return two_pair_params()


@pytest.fixture(scope="session")
def model(params):
    return derive(params)


@pytest.fixture(scope="session")
def prefs():
    return Preferences(2.0)


@pytest.fixture(scope="session")
def sol_futures(model, prefs):
    return solve(model, prefs, "futures")


@pytest.fixture(scope="session")
def sol_full(model, prefs):
    return solve(model, prefs, "full")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
