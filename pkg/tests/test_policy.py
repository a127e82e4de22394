import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from futbasis import Preferences, solve
from futbasis.policy import (
    ce_extremes,
    certainty_equivalent,
    exponent,
    full_strategy,
    futures_strategy,
    region_grid,
    strategy_coefficients,
    value,
)
from futbasis.simulate import confidence_region

from hjb_oracle import hjb_terms


def test_terminal_value_and_ce(sol_futures, sol_full):
    for sol in (sol_futures, sol_full):
        assert value(sol, 0.25, 1.0, [0.3, -0.1]) == pytest.approx(-1.0, abs=1e-15)
        assert certainty_equivalent(sol, 0.25, 2.5, [0.3, -0.1]) == pytest.approx(2.5, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(x=st.floats(1e-3, 1e3), z1=st.floats(-1, 1), z2=st.floats(-1, 1))
def test_ce_at_horizon_is_wealth(sol_full, x, z1, z2):
    assert certainty_equivalent(sol_full, 0.25, x, [z1, z2]) == x


def test_value_and_ce_consistent(sol_full):
    z = np.array([[0.02, -0.01], [0.0, 0.0], [-0.05, 0.1]])
    v = value(sol_full, 0.1, 2.0, z)
    ce = certainty_equivalent(sol_full, 0.1, 2.0, z)
    np.testing.assert_allclose(v, ce ** (1 - 2.0) / (1 - 2.0), rtol=1e-13)
    assert v.shape == (3,)


def test_homothetic_in_wealth(sol_futures):
    z = [0.01, 0.02]
    assert certainty_equivalent(sol_futures, 0.1, 3.0, z) == pytest.approx(3 * certainty_equivalent(sol_futures, 0.1, 1.0, z))
    np.testing.assert_allclose(futures_strategy(sol_futures, 0.1, 3.0, z), 3 * futures_strategy(sol_futures, 0.1, 1.0, z))


def test_terminal_futures_position(model, sol_futures):
    theta = futures_strategy(sol_futures, 0.25, 1.0, [0.0, 0.0])
    # two-by-two elimination of sigma_f theta = mu_f
    (a, b), (c, d) = model.sigma_f
    mf = model.params.mu_f
    det = a * d - b * c
    expected = np.array([d * mf[0] - b * mf[1], a * mf[1] - c * mf[0]]) / det / 2.0
    np.testing.assert_allclose(theta, expected, atol=1e-12)
    np.testing.assert_allclose(theta, [0.0445, 0.0516], atol=1e-4)


def test_short_in_contango(sol_futures):
    for i in range(2):
        z = np.zeros(2)
        z[i] = 1.0
        assert futures_strategy(sol_futures, 0.05, 1.0, z)[i] < 0
        assert futures_strategy(sol_futures, 0.05, 1.0, -z)[i] > 0


def test_full_market_pairs_oppose(model, sol_full):
    region = confidence_region(model, 0.05, 0.0)
    ring = region.boundary(400)
    theta, pi = full_strategy(sol_full, 0.05, 1.0, ring)
    assert theta.shape == pi.shape == (400, 2)
    # beyond the myopic part, the hedging terms enter futures and spot with opposite signs
    const, slope = strategy_coefficients(sol_full, 0.05)
    myopic = np.linalg.solve(model.sigma, model.eta(0.05)) / 2.0
    hedge = slope - myopic
    np.testing.assert_allclose(hedge[:2], -hedge[2:], atol=1e-12)
    # the small myopic part only matters near zero crossings of the positions
    for i in range(2):
        material = np.abs(theta[:, i]) > 0.05 * np.abs(theta[:, i]).max()
        assert np.all(np.sign(theta[material, i]) == -np.sign(pi[material, i]))
        assert np.mean(np.sign(theta[:, i]) == -np.sign(pi[:, i])) > 0.97


def test_strategy_variant_guard(sol_futures, sol_full):
    with pytest.raises(ValueError):
        futures_strategy(sol_full, 0.1, 1.0, [0, 0])
    with pytest.raises(ValueError):
        full_strategy(sol_futures, 0.1, 1.0, [0, 0])


def test_input_guards(model, sol_full):
    with pytest.raises(ValueError):
        value(sol_full, 0.3, 1.0, [0, 0])
    with pytest.raises(ValueError):
        value(sol_full, 0.1, 0.0, [0, 0])
    low = solve(model, Preferences(0.9, allow_nirvana=True), "full", 200)
    with pytest.raises(ValueError, match="gamma > 1"):
        certainty_equivalent(low, 0.1, 1.0, [0, 0])


@pytest.mark.parametrize("variant", ["futures", "full"])
def test_hjb_and_feedback_rule(variant, sol_futures, sol_full):
    sol = sol_futures if variant == "futures" else sol_full
    rng = np.random.default_rng(7)
    for _ in range(30):
        t = rng.uniform(0, 0.25)
        z = rng.normal(0, 0.1, 2)
        res, size, u = hjb_terms(sol, t, z, x=1.7)
        assert abs(res) / size < 1e-6
        if variant == "futures":
            np.testing.assert_allclose(futures_strategy(sol, t, 1.7, z), u, rtol=1e-9, atol=1e-12)
        else:
            np.testing.assert_allclose(np.concatenate(full_strategy(sol, t, 1.7, z)), u, rtol=1e-9, atol=1e-12)


def test_full_market_dominates(model, sol_futures, sol_full):
    z = np.random.default_rng(3).normal(0, 0.1, (50, 2))
    for t in (0.0, 0.1, 0.2):
        assert np.all(certainty_equivalent(sol_full, t, 1.0, z) >= certainty_equivalent(sol_futures, t, 1.0, z))


def test_exponent_is_concave_in_state(sol_full):
    _, _, h = sol_full.at(0.2)
    assert np.linalg.eigvalsh(h)[0] > 0
    z = np.array([0.03, -0.02])
    e = exponent(sol_full, 0.05, [z, -z, 0 * z])
    assert e[0] + e[1] <= 2 * e[2]


def test_ce_extremes_resolution(model, sol_futures):
    coarse = ce_extremes(sol_futures, 0.15, resolution=101)
    fine = ce_extremes(sol_futures, 0.15, resolution=401)
    assert fine.ce_max >= coarse.ce_max - 1e-12
    assert fine.ce_max == pytest.approx(coarse.ce_max, rel=5e-3)
    assert fine.ce_min == pytest.approx(coarse.ce_min, rel=5e-3)
    region = confidence_region(model, 0.15, 0.0)
    assert region.contains(fine.argmax) and region.contains(fine.argmin)


def test_ce_extremes_boundary_search_agrees(model, sol_full):
    grid = ce_extremes(sol_full, 0.1, resolution=401)
    # sampled-boundary search (used for other dimensions) forced on the same problem
    import futbasis.policy as pol

    region = confidence_region(model, 0.1, 0.0)
    pts = pol._ellipsoid_samples(region, 2**14, seed=1)
    ce = certainty_equivalent(sol_full, 0.1, 1.0, pts)
    assert ce.max() == pytest.approx(grid.ce_max, rel=2e-3)


def test_region_grid_inside(model):
    region = confidence_region(model, 0.1, 0.0)
    pts = region_grid(region, 51)
    assert len(pts) > 0.7 * 51 * 51 * np.pi / 4 and np.all(region.contains(pts))


def test_ce_max_curve_rises_then_falls(sol_futures):
    times = np.linspace(0.01, 0.25, 25)
    highs = np.array([ce_extremes(sol_futures, t, resolution=101).ce_max for t in times])
    peak = int(np.argmax(highs))
    assert 0 < peak < len(times) - 1
    assert np.all(np.diff(highs[: peak + 1]) > 0) and np.all(np.diff(highs[peak:]) < 0)
    assert highs[-1] == pytest.approx(1.0)
