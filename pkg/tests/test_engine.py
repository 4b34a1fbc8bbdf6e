import warnings

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from boostjm.data import JointDataset, standardize, split_holdout
from boostjm.engine import (
    BoostConfig, BoostingError, FitResult, evaluate_risk, fit, marginal_gaussian, predict_longitudinal,
    random_effects_cov, risk_of, variance_components,
)
from boostjm.jointlik import NuisanceParams
from boostjm.simgen import generate, preset
from conftest import toy_dataset


@pytest.fixture(scope="module")
def s1():
    ds, man = standardize(generate(preset("S1", seed=11, N=200)).dataset)
    return ds, man


def naive_l2_boost(X, y, m, nu):
    """Textbook component-wise L2 boosting with simple linear learners."""
    f = np.full(len(y), y.mean())
    beta = np.zeros(X.shape[1])
    icpt = y.mean()
    for _ in range(m):
        r = y - f
        best = None
        for j in range(X.shape[1]):
            A = np.column_stack([np.ones(len(y)), X[:, j]])
            coef, *_ = np.linalg.lstsq(A, r, rcond=None)
            sse = float(np.sum((r - A @ coef) ** 2))
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, coef)
        _, j, coef = best
        beta[j] += nu * coef[1]
        icpt += nu * coef[0]
        f = f + nu * (coef[0] + coef[1] * X[:, j])
    return icpt, beta


def test_longitudinal_part_is_l2_boosting(s1):
    ds, _ = s1
    cfg = BoostConfig(mstop_l=40, mstop_ls=0, entry_level_l=None)
    res = fit(ds, cfg=cfg)
    icpt, beta = naive_l2_boost(ds.x_long, ds.y, 40, 0.1)
    assert res.state.intercept_l == pytest.approx(icpt, abs=1e-10)
    np.testing.assert_allclose(res.beta_l, beta, atol=1e-10)


def test_zero_iterations(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=0, mstop_ls=0))
    assert np.all(res.state.eta_l == ds.y.mean())
    assert np.all(res.state.eta_ls == 0)
    assert res.nuisance.sigma2 == pytest.approx(np.var(ds.y), rel=1e-12)
    assert (res.nuisance.alpha, res.nuisance.lambda0) == (0.1, 0.1)
    assert not res.beta_l.any() and not res.beta_ls.any() and res.beta_t == 0
    assert res.path_long.shape == (1, 1 + ds.p_long)


def test_noiseless_longitudinal_recovery():
    rng = np.random.default_rng(2)
    N, J = 60, 4
    ids = np.repeat(np.arange(N), J)
    x = rng.normal(size=(N * J, 3))
    y = 1.5 * x[:, 1]
    ds = JointDataset(obs_ids=ids, time=np.tile(np.arange(J, dtype=float), N), y=y, x_long=x, ids=np.arange(N),
                      event_time=np.full(N, J + 1.0), status=np.zeros(N, int), x_shared=rng.normal(size=(N, 1)))
    std, man = standardize(ds)
    res = fit(std, cfg=BoostConfig(mstop_l=400, mstop_ls=0), manifest=man)
    assert res.original_scale()["beta_long"]["xl2"] == pytest.approx(1.5, abs=1e-3)
    assert set(res.selected_long) == {1}


def test_deterministic(s1):
    ds, _ = s1
    a = fit(ds, cfg=BoostConfig(mstop_l=30, mstop_ls=30))
    b = fit(ds, cfg=BoostConfig(mstop_l=30, mstop_ls=30))
    assert a.to_json() == b.to_json()


def test_shorter_fit_is_a_prefix(s1):
    ds, _ = s1
    snap = {}

    def keep(m, state, nuisance):
        snap[m] = (state.copy(), nuisance)

    fit(ds, cfg=BoostConfig(mstop_l=40, mstop_ls=25), callback=keep)
    short = fit(ds, cfg=BoostConfig(mstop_l=20, mstop_ls=20))
    state, nuisance = snap[20]
    np.testing.assert_array_equal(short.state.eta_l, state.eta_l)
    np.testing.assert_array_equal(short.state.gamma0, state.gamma0)
    assert short.nuisance == nuisance


def test_fit_tracks_paths_and_selection(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=50, mstop_ls=30))
    assert len(res.selected_long) == 50 and len(res.selected_shared) == 30
    np.testing.assert_allclose(res.path_long[-1, 1:], res.beta_l)
    np.testing.assert_allclose(res.path_shared[-1, -1], res.beta_t)
    res.state.check_decomposition(ds)
    # after the shared part stops only sigma2 moves
    fixed = fit(ds, cfg=BoostConfig(mstop_l=50, mstop_ls=10)).nuisance_trace
    assert np.all(fixed[10:, 1] == fixed[10, 1]) and np.all(fixed[10:, 2] == fixed[10, 2])


def test_predict_reproduces_training_fit(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=30, mstop_ls=30))
    np.testing.assert_allclose(res.predict(ds), res.state.eta_l + res.state.eta_ls, atol=1e-10)
    p = predict_longitudinal(res, [10**9], [0.0], np.zeros((1, ds.p_long)), np.zeros((1, ds.p_shared)))
    assert p[0] == pytest.approx(res.state.intercept_l + res.state.intercept_ls, abs=1e-12)
    with pytest.raises(ValueError):
        predict_longitudinal(res, [1], [0.0], np.zeros((1, ds.p_long + 1)), np.zeros((1, ds.p_shared)))


def test_json_round_trip_predicts_the_same(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=20, mstop_ls=20))
    back = FitResult.from_json(res.to_json())
    np.testing.assert_allclose(back.predict(ds), res.predict(ds), atol=1e-12)
    assert back.nuisance == res.nuisance
    assert back.selected_shared == res.selected_shared
    assert evaluate_risk(back, ds) == pytest.approx(evaluate_risk(res, ds), rel=1e-12)


def test_marginal_gaussian_matches_dense_normal():
    rng = np.random.default_rng(8)
    ds = toy_dataset(rng, N=6, max_obs=5)
    resid = rng.normal(size=ds.n)
    L = rng.normal(size=(2, 2))
    cov = L @ L.T + 0.1 * np.eye(2)
    s2 = 0.7
    ll, g0, g1 = marginal_gaussian(ds, resid, s2, cov)
    for i in range(ds.N):
        rows = ds.group == i
        Z = np.column_stack([np.ones(rows.sum()), ds.time[rows]])
        V = Z @ cov @ Z.T + s2 * np.eye(rows.sum())
        assert ll[i] == pytest.approx(multivariate_normal(np.zeros(rows.sum()), V).logpdf(resid[rows]), rel=1e-10)
        post_mean = cov @ Z.T @ np.linalg.solve(V, resid[rows])
        np.testing.assert_allclose([g0[i], g1[i]], post_mean, atol=1e-10)


def test_variance_components_maximize_the_marginal_likelihood():
    rng = np.random.default_rng(9)
    ds = toy_dataset(rng, N=80, max_obs=5)
    true = np.array([[1.0, 0.3], [0.3, 0.5]])
    g = rng.multivariate_normal(np.zeros(2), true, size=ds.N)
    resid = g[ds.group, 0] + g[ds.group, 1] * ds.time + rng.normal(size=ds.n) * 0.8
    s2, cov = variance_components(ds, resid, 1.0, np.eye(2), max_iter=5000, tol=1e-12)

    def negll(p):
        L = np.array([[np.exp(p[1]), 0.0], [p[2], np.exp(p[3])]])
        return -marginal_gaussian(ds, resid, np.exp(p[0]), L @ L.T)[0].sum()

    L = np.linalg.cholesky(cov)
    mine = negll([np.log(s2), np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])])
    best = minimize(negll, [0.0, 0.0, 0.0, 0.0], method="Nelder-Mead",
                    options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 20000})
    assert mine <= best.fun + 1e-6


def test_risk_modes(s1):
    ds, _ = s1
    train, test = split_holdout(ds, 0.5, seed=0)
    res = fit(train, cfg=BoostConfig(mstop_l=60, mstop_ls=60))
    for mode in ("marginal", "zero"):
        assert np.isfinite(evaluate_risk(res, test, unseen=mode))
    # on training individuals both modes agree
    assert evaluate_risk(res, train, "marginal") == pytest.approx(evaluate_risk(res, train, "zero"), rel=1e-12)
    with pytest.raises(ValueError):
        evaluate_risk(res, test, unseen="prior")
    plain = risk_of(test, train.ids, res.state, res.nuisance)
    assert np.isfinite(plain)


def test_random_effects_cov_is_second_moment(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=10, mstop_ls=40))
    g = np.column_stack([res.state.gamma0, res.state.gamma1])
    np.testing.assert_allclose(random_effects_cov(res.state), g.T @ g / ds.N)


def test_no_event_dataset_fits(s1):
    ds, _ = s1
    none = ds.replace(status=np.zeros(ds.N, int))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fit(none, cfg=BoostConfig(mstop_l=20, mstop_ls=20))
    assert res.nuisance.lambda0 == 0.1
    assert np.all(np.isfinite(res.loglik_trace))


def test_errors_are_annotated():
    rng = np.random.default_rng(1)
    ds = toy_dataset(rng, N=20)
    # a huge association pushes the hazard past the overflow guard
    big = ds.replace(y=ds.y * 1e6)
    with pytest.raises(BoostingError, match="iteration"):
        fit(big, cfg=BoostConfig(mstop_l=5, mstop_ls=5, alpha_offset=50.0, gradient_scaling="none"))


@pytest.mark.parametrize("bad", [dict(step_length=0.0), dict(step_length=1.5), dict(mstop_l=-1),
                                 dict(survival_weighting="x"), dict(gradient_scaling="x"),
                                 dict(re_penalty=-1.0), dict(entry_level_l=2.0), dict(lambda0_offset=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        BoostConfig(**bad)


def test_risk_on_training_data_is_negative_loglik(s1):
    from boostjm.jointlik import log_likelihood
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=30, mstop_ls=30))
    st = res.state
    ll = log_likelihood(ds, st, res.nuisance)
    assert evaluate_risk(res, ds) == pytest.approx(-ll, rel=1e-12)


def test_shuffled_responses_raise_the_risk():
    wins = 0
    for seed in range(20):
        full, _ = standardize(generate(preset("S1", seed=seed, N=120)).dataset)
        train, test = split_holdout(full, 0.5, seed=seed)
        res = fit(train, cfg=BoostConfig(mstop_l=60, mstop_ls=60))
        perm = np.random.default_rng(seed).permutation(test.n)
        wins += evaluate_risk(res, test.replace(y=test.y[perm])) > evaluate_risk(res, test)
    assert wins >= 11


def test_risk_rejects_other_arity(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=5, mstop_ls=5))
    other = standardize(generate(preset("S2", seed=1, N=30)).dataset)[0]
    with pytest.raises(ValueError):
        evaluate_risk(res, other)


def test_unselected_learners_have_zero_coefficients(s1):
    ds, _ = s1
    res = fit(ds, cfg=BoostConfig(mstop_l=80, mstop_ls=80))
    unused_l = np.setdiff1d(np.arange(ds.p_long), res.selected_long)
    unused_s = np.setdiff1d(np.arange(ds.p_shared), [j for j in res.selected_shared if 0 <= j < ds.p_shared])
    assert np.all(res.beta_l[unused_l] == 0) and np.all(res.beta_ls[unused_s] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_selection_histories_nest(seed):
    rng = np.random.default_rng(seed)
    ds, _ = standardize(generate(preset("S1", seed=seed, N=80)).dataset)
    a, b = (int(v) for v in rng.integers(5, 40, size=2))
    da, db = (int(v) for v in rng.integers(1, 20, size=2))
    short = fit(ds, cfg=BoostConfig(mstop_l=a, mstop_ls=b))
    long = fit(ds, cfg=BoostConfig(mstop_l=a + da, mstop_ls=b))
    assert long.selected_long[:a] == short.selected_long
    longer_ls = fit(ds, cfg=BoostConfig(mstop_l=a, mstop_ls=b + db))
    assert longer_ls.selected_shared[:b] == short.selected_shared
