import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from boostjm.jointlik import (
    HazardOverflowError, NuisanceParams, PredictorState, cum_hazard_integral, event_cdf, gradient_l,
    gradient_ls, hazard_integral, log_likelihood, log_likelihood_parts, survival_score, update_nuisance,
)
from conftest import random_nuisance, random_state, toy_dataset


def _shift_individual(ds, state, i, h):
    """State with individual i's shared predictor moved by a constant h."""
    tf = state.eta_ls_timefree.copy()
    tf[i] += h
    return PredictorState.from_predictors(ds, state.eta_l, tf, state.beta_t, gamma1=state.gamma1)


def _fd(f, h):
    return (f(h) - f(-h)) / (2 * h)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_l_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ds = toy_dataset(rng)
    state, nu = random_state(ds, rng), random_nuisance(rng)
    g = gradient_l(ds, state, nu)
    for k in range(ds.n):
        def f(h):
            s = state.copy()
            s.eta_l = s.eta_l.copy()
            s.eta_l[k] += h
            return log_likelihood(ds, s, nu)
        assert _fd(f, 1e-5) == pytest.approx(g[k], rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_shared_gradient_aggregate_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    ds = toy_dataset(rng)
    state, nu = random_state(ds, rng), random_nuisance(rng)
    agg = np.bincount(ds.group, weights=gradient_ls(ds, state, nu, "mean"), minlength=ds.N)
    last = np.bincount(ds.group, weights=gradient_ls(ds, state, nu, "last"), minlength=ds.N)
    for i in range(ds.N):
        fd = _fd(lambda h: log_likelihood(ds, _shift_individual(ds, state, i, h), nu), 1e-5)
        assert agg[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
        assert last[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_replicate_weighting_copies_the_score(rng):
    ds = toy_dataset(rng)
    state, nu = random_state(ds, rng), random_nuisance(rng)
    rep = gradient_ls(ds, state, nu, "replicate")
    mean = gradient_ls(ds, state, nu, "mean")
    score = survival_score(ds, state, nu)
    np.testing.assert_allclose(rep - mean, (score - score / ds.n_obs)[ds.group], atol=1e-12)


def test_unknown_weighting_rejected(rng):
    ds = toy_dataset(rng)
    with pytest.raises(ValueError):
        gradient_ls(ds, random_state(ds, rng), random_nuisance(rng), "median")


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
@settings(max_examples=300, deadline=None)
@given(a=st.floats(-3, 3), s=st.floats(-3, 3), T=st.floats(0, 10), alpha=st.floats(-2, 2),
       tiny=st.sampled_from([0.0, 1e-12, 1e-11, 1e-9, 1e-6]))
def test_hazard_integral_matches_quadrature(a, s, T, alpha, tiny):
    if tiny and abs(alpha) > 1e-3:
        s = math.copysign(tiny, s or 1.0) / abs(alpha)  # alpha * slope of size tiny
    got = float(hazard_integral(a, s, T, alpha))
    want, _ = quad(lambda u: math.exp(alpha * (a + s * u)), 0, T, epsabs=0, epsrel=1e-12, limit=200)
    assert got == pytest.approx(want, rel=1e-8, abs=1e-300)


def test_hazard_integral_limit_branch_is_continuous():
    a, T, alpha = 0.3, 2.5, 0.7
    s_eps = 1e-10 / alpha
    below = float(hazard_integral(a, s_eps * 0.999, T, alpha))
    above = float(hazard_integral(a, s_eps * 1.001, T, alpha))
    assert below == pytest.approx(above, rel=1e-9)
    assert float(hazard_integral(a, 0.0, T, alpha)) == pytest.approx(T * math.exp(alpha * a), rel=1e-15)


def test_alpha_zero_reduces_to_exponential(rng):
    ds = toy_dataset(rng)
    state = random_state(ds, rng)
    nu = NuisanceParams(1.0, 0.0, 0.2)
    _, surv = log_likelihood_parts(ds, state, nu)
    np.testing.assert_allclose(surv, ds.status * math.log(0.2) - 0.2 * ds.event_time, rtol=1e-12)
    np.testing.assert_allclose(survival_score(ds, state, nu), 0.0)


def test_hazard_overflow_raises():
    with pytest.raises(HazardOverflowError):
        hazard_integral(800.0, 0.0, 1.0, 1.0)


def test_event_cdf_hand_value(rng):
    ds = toy_dataset(rng, N=1, max_obs=1)
    state = PredictorState.from_predictors(ds, 0.0, 0.4, beta_t=0.5)
    nu = NuisanceParams(1.0, 0.8, 0.1)
    # H(t) = 0.1 * e^{0.32} * (e^{0.4 t} - 1) / 0.4
    H = 0.1 * math.exp(0.32) * (math.exp(0.4 * 1.5) - 1) / 0.4
    assert cum_hazard_integral(state, nu, 0, 1.5) == pytest.approx(H, rel=1e-14)
    assert event_cdf(state, nu, 0, 1.5) == pytest.approx(1 - math.exp(-H), rel=1e-14)
    assert event_cdf(state, nu, 0, 0.0) == 0.0
    with pytest.raises(ValueError):
        event_cdf(state, nu, 0, -1.0)


@pytest.mark.parametrize("seed", range(25))
def test_update_nuisance_never_decreases_likelihood(seed):
    rng = np.random.default_rng(500 + seed)
    ds = toy_dataset(rng, N=15)
    state, nu = random_state(ds, rng), random_nuisance(rng)
    new = update_nuisance(ds, state, nu)
    assert log_likelihood(ds, state, new) >= log_likelihood(ds, state, nu) - 1e-9


def test_update_nuisance_is_the_maximum(rng):
    ds = toy_dataset(rng, N=40, event_rate=0.6)
    state = random_state(ds, rng)
    best = update_nuisance(ds, state, NuisanceParams(1.0, 0.1, 0.1))
    base = log_likelihood(ds, state, best)
    for d in ((1.05, 0, 1), (0.95, 0, 1), (1, 0.01, 1), (1, -0.01, 1), (1, 0, 1.02), (1, 0, 0.98)):
        other = NuisanceParams(best.sigma2 * d[0], best.alpha + d[1], best.lambda0 * d[2])
        assert log_likelihood(ds, state, other) <= base + 1e-9


def test_update_nuisance_without_events_keeps_lambda(rng):
    ds = toy_dataset(rng, event_rate=0.0)
    state = random_state(ds, rng)
    nu = NuisanceParams(1.0, 0.3, 0.2)
    with pytest.warns(RuntimeWarning):
        new = update_nuisance(ds, state, nu)
    assert new.lambda0 == 0.2
    assert np.isfinite(new.alpha)
    assert log_likelihood(ds, state, new) >= log_likelihood(ds, state, nu) - 1e-9


def test_nuisance_validation():
    with pytest.raises(ValueError):
        NuisanceParams(0.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        NuisanceParams(1.0, 0.1, -1.0)
    with pytest.raises(ValueError):
        NuisanceParams(1.0, float("nan"), 0.1)
