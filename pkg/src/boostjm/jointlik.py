"""Joint likelihood of a Gaussian longitudinal model and a constant-baseline
proportional hazards model linked through a shared sub-predictor.

For individual ``i`` the shared predictor is linear in time,

    eta_ls_i(t) = a_i + s_i * t,    s_i = beta_t + gamma1_i,

where ``a_i`` (the time-free part) holds the shared intercept, the
time-constant covariate effects and the random intercept ``gamma0_i``.
The cumulative hazard is then available in closed form:

    H_i(T) = lambda0 * exp(alpha * a_i) * expm1(alpha * s_i * T) / (alpha * s_i).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from boostjm.data import JointDataset

log = logging.getLogger(__name__)

SLOPE_EPS = 1e-10
MAX_EXPONENT = 700.0
ALPHA_BRACKET = 5.0
ALPHA_BRACKET_MAX = 40.0
ALPHA_XTOL = 1e-7
SURVIVAL_WEIGHTINGS = ("replicate", "mean", "last")


class HazardOverflowError(ArithmeticError):
    """``exp`` of a hazard exponent would overflow."""

    def __init__(self, exponent: float):
        super().__init__(f"hazard exponent {exponent:.6g} overflows exp()")
        self.exponent = float(exponent)


@dataclass(frozen=True)
class NuisanceParams:
    sigma2: float
    alpha: float
    lambda0: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (math.isfinite(self.lambda0) and self.lambda0 > 0):
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")


@dataclass
class PredictorState:
    """Current fitted values of both sub-predictors.

    ``eta_ls_timefree`` carries everything in the shared predictor that does
    not move with time, the random intercept included; ``eta_ls`` is kept in
    sync by the engine and can be checked with :meth:`check_decomposition`.
    The coefficient fields are the aggregated boosting coefficients on the
    standardized covariate scale.
    """

    eta_l: np.ndarray
    eta_ls: np.ndarray
    eta_ls_timefree: np.ndarray
    beta_t: float
    gamma0: np.ndarray
    gamma1: np.ndarray
    intercept_l: float = 0.0
    beta_l: np.ndarray = field(default_factory=lambda: np.zeros(0))
    intercept_ls: float = 0.0
    beta_ls: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_predictors(cls, ds: JointDataset, eta_l, timefree, beta_t=0.0, gamma1=None, gamma0=None):
        """State from raw per-row ``eta_l`` and per-individual time-free part."""
        eta_l = np.broadcast_to(np.asarray(eta_l, dtype=float), (ds.n,)).copy()
        timefree = np.broadcast_to(np.asarray(timefree, dtype=float), (ds.N,)).copy()
        gamma1 = np.zeros(ds.N) if gamma1 is None else np.broadcast_to(np.asarray(gamma1, float), (ds.N,)).copy()
        gamma0 = np.zeros(ds.N) if gamma0 is None else np.broadcast_to(np.asarray(gamma0, float), (ds.N,)).copy()
        eta_ls = timefree[ds.group] + (beta_t + gamma1)[ds.group] * ds.time
        return cls(eta_l=eta_l, eta_ls=eta_ls, eta_ls_timefree=timefree, beta_t=float(beta_t),
                   gamma0=gamma0, gamma1=gamma1)

    @classmethod
    def from_coefficients(cls, ds: JointDataset, intercept_l, beta_l, intercept_ls, beta_ls, beta_t,
                          gamma0=None, gamma1=None):
        """State evaluated on ``ds`` (covariates already on the fitting scale)."""
        beta_l = np.asarray(beta_l, dtype=float)
        beta_ls = np.asarray(beta_ls, dtype=float)
        if beta_l.shape != (ds.p_long,) or beta_ls.shape != (ds.p_shared,):
            raise ValueError(
                f"covariate arity mismatch: model has ({beta_l.size}, {beta_ls.size}), "
                f"data has ({ds.p_long}, {ds.p_shared})"
            )
        gamma0 = np.zeros(ds.N) if gamma0 is None else np.asarray(gamma0, dtype=float)
        gamma1 = np.zeros(ds.N) if gamma1 is None else np.asarray(gamma1, dtype=float)
        eta_l = intercept_l + ds.x_long @ beta_l
        timefree = intercept_ls + ds.x_shared @ beta_ls + gamma0
        state = cls.from_predictors(ds, eta_l, timefree, beta_t, gamma1=gamma1, gamma0=gamma0)
        state.intercept_l, state.beta_l = float(intercept_l), beta_l.copy()
        state.intercept_ls, state.beta_ls = float(intercept_ls), beta_ls.copy()
        return state

    def slope(self) -> np.ndarray:
        return self.beta_t + self.gamma1

    def eta_ls_at(self, t) -> np.ndarray:
        """Shared predictor of every individual at per-individual times ``t``."""
        return self.eta_ls_timefree + self.slope() * t

    def check_decomposition(self, ds: JointDataset, tol: float = 1e-10) -> float:
        """Max deviation of ``eta_ls`` from its time-free + slope decomposition."""
        rebuilt = self.eta_ls_timefree[ds.group] + self.slope()[ds.group] * ds.time
        err = float(np.max(np.abs(rebuilt - self.eta_ls), initial=0.0))
        if err > tol * max(1.0, float(np.max(np.abs(self.eta_ls), initial=0.0))):
            raise AssertionError(f"shared predictor decomposition violated by {err:.3g}")
        return err

    def copy(self) -> "PredictorState":
        return PredictorState(
            eta_l=self.eta_l.copy(), eta_ls=self.eta_ls.copy(), eta_ls_timefree=self.eta_ls_timefree.copy(),
            beta_t=self.beta_t, gamma0=self.gamma0.copy(), gamma1=self.gamma1.copy(),
            intercept_l=self.intercept_l, beta_l=self.beta_l.copy(),
            intercept_ls=self.intercept_ls, beta_ls=self.beta_ls.copy(),
        )


# ---------------------------------------------------------------------------
# Hazard integral
# ---------------------------------------------------------------------------


def hazard_integral(timefree, slope, upper, alpha, check=True):
    """``int_0^upper exp(alpha * (timefree + slope * u)) du``, elementwise.

    Uses ``expm1`` so the result stays accurate as ``alpha * slope`` shrinks;
    below ``SLOPE_EPS`` the analytic limit ``upper * exp(alpha * timefree)``
    is used.
    """
    a = np.asarray(timefree, dtype=float)
    s = np.asarray(slope, dtype=float)
    T = np.asarray(upper, dtype=float)
    base = alpha * a
    rate = alpha * s
    top = base + np.maximum(rate * T, 0.0)
    if check:
        worst = np.max(top, initial=-np.inf)
        if worst > MAX_EXPONENT or not np.all(np.isfinite(top)):
            raise HazardOverflowError(worst if np.isfinite(worst) else np.nan)
    small = np.abs(rate) < SLOPE_EPS
    safe_rate = np.where(small, 1.0, rate)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(small, T * np.exp(base), np.exp(base) * np.expm1(rate * T) / safe_rate)
    return out


def cum_hazard_integral(state: PredictorState, nuisance: NuisanceParams, i: int, upper: float) -> float:
    """Cumulative hazard ``lambda0 * int_0^upper exp(alpha * eta_ls_i(u)) du`` of individual ``i``."""
    if upper < 0:
        raise ValueError("upper limit must be nonnegative")
    val = hazard_integral(state.eta_ls_timefree[i], state.slope()[i], upper, nuisance.alpha)
    return float(nuisance.lambda0 * val)


def event_cdf(state: PredictorState, nuisance: NuisanceParams, i: int, t: float) -> float:
    """Probability that individual ``i`` has had the event by time ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(-np.expm1(-cum_hazard_integral(state, nuisance, i, t)))


# ---------------------------------------------------------------------------
# Likelihood and gradients
# ---------------------------------------------------------------------------


def _check_dims(ds: JointDataset, state: PredictorState):
    if state.eta_l.shape != (ds.n,) or state.eta_ls.shape != (ds.n,):
        raise ValueError(f"predictor length {state.eta_l.shape} does not match {ds.n} observations")
    if state.eta_ls_timefree.shape != (ds.N,) or state.gamma1.shape != (ds.N,):
        raise ValueError(f"per-individual arrays do not match {ds.N} individuals")


def log_likelihood_parts(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams):
    """Gaussian log-likelihood (scalar) and per-individual survival log-likelihood."""
    _check_dims(ds, state)
    if not nuisance.sigma2 > 0 or not nuisance.lambda0 > 0:
        raise ValueError("sigma2 and lambda0 must be positive")
    r = ds.y - state.eta_l - state.eta_ls
    s2 = nuisance.sigma2
    gauss = -0.5 * ds.n * math.log(2.0 * math.pi * s2) - 0.5 * float(r @ r) / s2
    a, s, T = state.eta_ls_timefree, state.slope(), ds.event_time
    H = nuisance.lambda0 * hazard_integral(a, s, T, nuisance.alpha)
    surv = ds.status * (math.log(nuisance.lambda0) + nuisance.alpha * (a + s * T)) - H
    return gauss, surv


def log_likelihood(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams) -> float:
    """Joint log-likelihood: Gaussian longitudinal factor plus survival factor."""
    gauss, surv = log_likelihood_parts(ds, state, nuisance)
    return float(gauss + surv.sum())


def gradient_l(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams) -> np.ndarray:
    """Negative gradient of the loss w.r.t. ``eta_l``: residuals over ``sigma2``."""
    _check_dims(ds, state)
    return (ds.y - state.eta_ls - state.eta_l) / nuisance.sigma2


def survival_score(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams) -> np.ndarray:
    """Per-individual derivative of the survival log-likelihood under a
    constant shift of the shared predictor."""
    a, s, T = state.eta_ls_timefree, state.slope(), ds.event_time
    alpha = nuisance.alpha
    return ds.status * alpha - nuisance.lambda0 * alpha * hazard_integral(a, s, T, alpha)


def gradient_ls(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams,
                survival_weighting: str = "replicate") -> np.ndarray:
    """Negative gradient w.r.t. the shared predictor, one entry per observation.

    The survival part is computed once per individual at its event/censoring
    time. ``survival_weighting`` decides how it is spread over that
    individual's rows: ``"replicate"`` copies it to every row, ``"mean"``
    divides it by the number of rows, ``"last"`` puts it on the last row only.
    """
    _check_dims(ds, state)
    resid = (ds.y - state.eta_l - state.eta_ls) / nuisance.sigma2
    score = survival_score(ds, state, nuisance)
    if survival_weighting == "replicate":
        return resid + score[ds.group]
    if survival_weighting == "mean":
        return resid + (score / ds.n_obs)[ds.group]
    if survival_weighting == "last":
        resid[ds.last_row] += score
        return resid
    raise ValueError(f"unknown survival weighting {survival_weighting!r}; expected one of {SURVIVAL_WEIGHTINGS}")


# ---------------------------------------------------------------------------
# Nuisance update
# ---------------------------------------------------------------------------


def _survival_loglik(alpha, lam, events, eta_T_events, a, s, T):
    try:
        integ = hazard_integral(a, s, T, alpha)
    except HazardOverflowError:
        return -np.inf
    return events * math.log(lam) + alpha * eta_T_events - lam * float(integ.sum())


def _maximize_alpha(objective, start: float) -> float:
    """Maximize a concave scalar function of alpha on an expanding bracket."""
    half = ALPHA_BRACKET
    while True:
        lo, hi = min(-half, start - 1.0), max(half, start + 1.0)
        res = minimize_scalar(lambda x: -objective(x), bounds=(lo, hi), method="bounded",
                              options={"xatol": ALPHA_XTOL})
        x = float(res.x)
        at_edge = min(x - lo, hi - x) < 1e-4 * (hi - lo)
        if not at_edge or half >= ALPHA_BRACKET_MAX:
            return x
        half *= 2.0


def update_nuisance(ds: JointDataset, state: PredictorState, current: NuisanceParams,
                    freeze_survival: bool = False) -> NuisanceParams:
    """Maximize the joint likelihood over ``(sigma2, alpha, lambda0)`` at fixed predictors.

    ``sigma2`` is the Gaussian MLE. Unless ``freeze_survival`` is set,
    ``lambda0`` is profiled out in closed form and ``alpha`` maximizes the
    profile likelihood. The returned survival pair is never worse than the
    current one.
    """
    _check_dims(ds, state)
    r = ds.y - state.eta_l - state.eta_ls
    sigma2 = max(float(r @ r) / ds.n, np.finfo(float).tiny)
    if freeze_survival:
        return NuisanceParams(sigma2, current.alpha, current.lambda0)

    a, s, T = state.eta_ls_timefree, state.slope(), ds.event_time
    events = float(ds.status.sum())
    eta_T_events = float(ds.status @ (a + s * T))

    if events == 0:
        warnings.warn("no events in dataset: lambda0 kept, only alpha optimized", RuntimeWarning, stacklevel=2)
        lam = current.lambda0

        def objective(alpha):
            return _survival_loglik(alpha, lam, 0.0, 0.0, a, s, T)

        cand = _maximize_alpha(objective, current.alpha)
        best = max(((objective(cand), cand), (objective(current.alpha), current.alpha)), key=lambda p: p[0])
        return NuisanceParams(sigma2, best[1], lam)

    def profile_lambda(alpha):
        try:
            total = float(hazard_integral(a, s, T, alpha).sum())
        except HazardOverflowError:
            return None
        return events / total if total > 0 else None

    def profile(alpha):
        lam = profile_lambda(alpha)
        if lam is None or not lam > 0:
            return -np.inf
        return events * math.log(lam) + alpha * eta_T_events - events

    cand = _maximize_alpha(profile, current.alpha)
    options = [
        (_survival_loglik(current.alpha, current.lambda0, events, eta_T_events, a, s, T),
         current.alpha, current.lambda0),
    ]
    for alpha in (current.alpha, cand):
        lam = profile_lambda(alpha)
        if lam is not None and lam > 0 and math.isfinite(lam):
            options.append((_survival_loglik(alpha, lam, events, eta_T_events, a, s, T), alpha, lam))
    # strict > keeps the earliest (current) option on ties
    best = options[0]
    for opt in options[1:]:
        if opt[0] > best[0]:
            best = opt
    return NuisanceParams(sigma2, best[1], best[2])
