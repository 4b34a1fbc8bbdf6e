"""Boosting driver for joint models.

Each iteration ``m`` runs up to three steps:

1. while ``m <= mstop_l``: fit the longitudinal bank to the longitudinal
   gradient and move ``eta_l`` by ``step_length`` times the best fit;
2. while ``m <= mstop_ls``: same for the shared bank, with the gradient
   evaluated at the just-updated ``eta_l``;
3. re-estimate ``sigma2``; re-estimate ``(alpha, lambda0)`` only while
   ``m <= mstop_ls``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from boostjm.baselearners import (
    DEFAULT_RE_DF,
    Design,
    row_functionals,
    null_gain_scale,
    strong_candidates,
    FitError,
    LearnerBank,
    LinearLearner,
    RandomEffectsLearner,
    TimeLearner,
    default_banks,
)
from boostjm.data import JointDataset, ScalingManifest
from boostjm.jointlik import (
    HazardOverflowError,
    NuisanceParams,
    PredictorState,
    gradient_l,
    gradient_ls,
    log_likelihood,
    log_likelihood_parts,
    update_nuisance,
)

log = logging.getLogger(__name__)


class BoostingError(RuntimeError):
    """Numerical failure inside a boosting iteration."""


@dataclass
class BoostConfig:
    """Settings of one boosting run.

    ``re_penalty`` is the ridge weight of the random-effects learner; set it
    to None to choose the weight from ``re_df`` instead. ``re_guard`` keeps
    the random effects from absorbing covariate effects (see
    :class:`~boostjm.baselearners.RandomEffectsLearner`).

    ``gradient_scaling="fisher"`` multiplies both gradients by the current
    residual variance so that a boosting step moves the longitudinal fit by
    ``step_length`` times a least-squares fit, whatever the scale of ``y``;
    ``"none"`` uses the raw log-likelihood gradients.
    ``survival_weighting`` spreads each individual's survival score over its
    rows: ``"mean"`` divides it by the number of rows (the row sum equals the
    log-likelihood derivative), ``"replicate"`` copies it to every row and
    ``"last"`` puts it on the last row only.

    ``entry_level_l`` and ``entry_level_ls`` gate new covariates: a
    covariate that has not been selected yet may only enter when its
    least-squares gain exceeds what chance would give at this family-wise
    level over the candidates of one iteration. None disables the gate.
    """

    step_length: float = 0.1
    mstop_l: int = 100
    mstop_ls: int = 100
    lambda0_offset: float = 0.1
    alpha_offset: float = 0.1
    re_penalty: Optional[float] = 1.0
    re_df: float = DEFAULT_RE_DF
    re_guard: bool = True
    survival_weighting: str = "mean"
    gradient_scaling: str = "fisher"
    entry_level_l: Optional[float] = 1e-4
    entry_level_ls: Optional[float] = 1e-4

    def __post_init__(self):
        for lvl in (self.entry_level_l, self.entry_level_ls):
            if lvl is not None and not 0 < lvl < 1:
                raise ValueError(f"entry levels must lie in (0, 1), got {lvl}")
        if self.survival_weighting not in ("mean", "replicate", "last"):
            raise ValueError("survival_weighting must be 'mean', 'replicate' or 'last'")
        if self.re_penalty is not None and self.re_penalty < 0:
            raise ValueError("re_penalty must be nonnegative")
        if self.gradient_scaling not in ("fisher", "none"):
            raise ValueError("gradient_scaling must be 'fisher' or 'none'")
        if not 0 < self.step_length <= 1:
            raise ValueError(f"step_length must lie in (0, 1], got {self.step_length}")
        if self.mstop_l < 0 or self.mstop_ls < 0:
            raise ValueError("stopping iterations must be nonnegative")
        if not self.lambda0_offset > 0:
            raise ValueError("lambda0 offset must be positive")
        self.mstop_l = int(self.mstop_l)
        self.mstop_ls = int(self.mstop_ls)

    def with_mstop(self, mstop_l: int, mstop_ls: int) -> "BoostConfig":
        d = asdict(self)
        d.update(mstop_l=mstop_l, mstop_ls=mstop_ls)
        return BoostConfig(**d)


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    Paths have one row per iteration ``0..max(mstop_l, mstop_ls)``. The
    longitudinal path holds ``[intercept, beta_l...]``, the shared path
    ``[intercept, beta_ls..., beta_t]``, all on the standardized scale.
    Selection histories hold the winning bank index per boosting step of
    each sub-predictor.
    """

    config: BoostConfig
    state: PredictorState
    nuisance: NuisanceParams
    train_ids: np.ndarray
    names_long: tuple
    names_shared: tuple
    bank_names_long: tuple
    bank_names_shared: tuple
    path_long: np.ndarray
    path_shared: np.ndarray
    selected_long: list
    selected_shared: list
    loglik_trace: np.ndarray
    nuisance_trace: np.ndarray
    manifest: Optional[ScalingManifest] = None
    risk_trace: dict = field(default_factory=dict)
    marginal_sigma2: Optional[float] = None
    marginal_cov: Optional[np.ndarray] = None

    @property
    def beta_l(self) -> np.ndarray:
        return self.state.beta_l

    @property
    def beta_ls(self) -> np.ndarray:
        return self.state.beta_ls

    @property
    def beta_t(self) -> float:
        return self.state.beta_t

    def selected_set(self, which: str) -> set:
        hist = self.selected_long if which == "long" else self.selected_shared
        return set(hist)

    def original_scale(self) -> dict:
        """Coefficients back-transformed through the scaling manifest."""
        man = self.manifest or ScalingManifest({k: (0.0, 1.0) for k in self.names_long + self.names_shared})
        ml, sl = man.params(self.names_long)
        ms, ss = man.params(self.names_shared)
        bl = self.state.beta_l / sl
        bls = self.state.beta_ls / ss
        return {
            "intercept_long": float(self.state.intercept_l - bl @ ml),
            "beta_long": dict(zip(self.names_long, map(float, bl))),
            "intercept_shared": float(self.state.intercept_ls - bls @ ms),
            "beta_shared": dict(zip(self.names_shared, map(float, bls))),
            "beta_time": float(self.state.beta_t),
        }

    def predict(self, ds: JointDataset) -> np.ndarray:
        """``eta_l + eta_ls`` on the rows of a dataset on the fitting scale."""
        return predict_longitudinal(self, ds.obs_ids, ds.time, ds.x_long, ds.x_shared[ds.group])

    def to_dict(self) -> dict:
        st = self.state
        return {
            "config": asdict(self.config),
            "nuisance": asdict(self.nuisance),
            "coefficients_standardized": {
                "intercept_long": st.intercept_l,
                "beta_long": dict(zip(self.names_long, map(float, st.beta_l))),
                "intercept_shared": st.intercept_ls,
                "beta_shared": dict(zip(self.names_shared, map(float, st.beta_ls))),
                "beta_time": st.beta_t,
            },
            "coefficients": self.original_scale(),
            "random_effects": {
                "ids": self.train_ids.tolist(),
                "gamma0": st.gamma0.tolist(),
                "gamma1": st.gamma1.tolist(),
            },
            "bank_long": list(self.bank_names_long),
            "bank_shared": list(self.bank_names_shared),
            "selected_long": [self.bank_names_long[j] for j in self.selected_long],
            "selected_shared": [self.bank_names_shared[j] for j in self.selected_shared],
            "loglik_trace": self.loglik_trace.tolist(),
            "risk_trace": {str(k): v for k, v in self.risk_trace.items()},
            "marginal_components": None if self.marginal_sigma2 is None else {
                "sigma2": self.marginal_sigma2, "cov": np.asarray(self.marginal_cov).tolist()},
            "manifest": None if self.manifest is None else {k: {"mean": m, "sd": s}
                                                            for k, (m, s) in self.manifest.columns.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        """Rebuild a fit saved with :meth:`to_dict`.

        Coefficients, random effects, nuisance parameters, selections and
        the manifest come back; coefficient paths do not, and the fitted
        values are left empty (use :func:`state_on` to evaluate on data).
        """
        co = d["coefficients_standardized"]
        re = d["random_effects"]
        names_long = tuple(co["beta_long"])
        names_shared = tuple(co["beta_shared"])
        empty = np.zeros(0)
        state = PredictorState(
            eta_l=empty, eta_ls=empty, eta_ls_timefree=empty, beta_t=float(co["beta_time"]),
            gamma0=np.asarray(re["gamma0"], dtype=float), gamma1=np.asarray(re["gamma1"], dtype=float),
            intercept_l=float(co["intercept_long"]), beta_l=np.asarray(list(co["beta_long"].values()), float),
            intercept_ls=float(co["intercept_shared"]),
            beta_ls=np.asarray(list(co["beta_shared"].values()), float),
        )
        bank_l = tuple(d.get("bank_long", ()))
        bank_s = tuple(d.get("bank_shared", ()))
        manifest = None
        if d.get("manifest") is not None:
            manifest = ScalingManifest({k: (v["mean"], v["sd"]) for k, v in d["manifest"].items()})
        return cls(
            config=BoostConfig(**d["config"]),
            state=state,
            nuisance=NuisanceParams(**d["nuisance"]),
            train_ids=np.asarray(re["ids"], dtype=np.int64),
            names_long=names_long, names_shared=names_shared,
            bank_names_long=bank_l, bank_names_shared=bank_s,
            path_long=np.zeros((0, 1 + len(names_long))),
            path_shared=np.zeros((0, 2 + len(names_shared))),
            selected_long=[bank_l.index(n) for n in d.get("selected_long", [])],
            selected_shared=[bank_s.index(n) for n in d.get("selected_shared", [])],
            loglik_trace=np.asarray(d.get("loglik_trace", []), dtype=float),
            nuisance_trace=np.zeros((0, 3)),
            manifest=manifest,
            risk_trace={int(k): v for k, v in d.get("risk_trace", {}).items()},
            marginal_sigma2=None if d.get("marginal_components") is None else d["marginal_components"]["sigma2"],
            marginal_cov=None if d.get("marginal_components") is None
            else np.asarray(d["marginal_components"]["cov"], dtype=float),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))

    def path_csv_rows(self):
        """Rows ``iteration, sub_predictor, term, value`` for plotting coefficient paths."""
        rows = []
        long_terms = ("(intercept)",) + self.names_long
        shared_terms = ("(intercept)",) + self.names_shared + ("time",)
        for m in range(self.path_long.shape[0]):
            for term, v in zip(long_terms, self.path_long[m]):
                rows.append((m, "long", term, float(v)))
            for term, v in zip(shared_terms, self.path_shared[m]):
                rows.append((m, "shared", term, float(v)))
        return rows


def _check_banks(ds, long_bank, shared_bank):
    for lr in long_bank:
        if not isinstance(lr, LinearLearner):
            raise ValueError("the longitudinal bank supports linear learners only")
        if lr.covariate_index >= ds.p_long:
            raise ValueError(f"longitudinal learner refers to covariate {lr.covariate_index} of {ds.p_long}")
    for lr in shared_bank:
        if isinstance(lr, LinearLearner) and lr.covariate_index >= ds.p_shared:
            raise ValueError(f"shared learner refers to covariate {lr.covariate_index} of {ds.p_shared}")


def initial_state(ds: JointDataset) -> tuple[PredictorState, float]:
    """Offsets: ``eta_l`` at the mean response, ``eta_ls`` at zero."""
    ybar = float(ds.y.mean())
    state = PredictorState.from_coefficients(ds, ybar, np.zeros(ds.p_long), 0.0, np.zeros(ds.p_shared), 0.0)
    r = ds.y - ybar
    sigma2 = float(r @ r) / ds.n
    return state, sigma2


def fit(ds: JointDataset, banks: Optional[tuple[LearnerBank, LearnerBank]] = None,
        cfg: Optional[BoostConfig] = None, manifest: Optional[ScalingManifest] = None,
        callback: Optional[Callable[[int, PredictorState, NuisanceParams], None]] = None,
        check_every: int = 10) -> FitResult:
    """Boost both sub-predictors of a joint model on a (standardized) dataset.

    ``callback(m, state, nuisance)`` is called after iteration ``m`` (and
    once for ``m = 0``); the state must not be modified.
    """
    cfg = cfg or BoostConfig()
    if banks is None:
        banks = default_banks(ds, re_penalty=cfg.re_penalty, re_df=cfg.re_df, re_guard=cfg.re_guard)
    long_bank, shared_bank = banks
    _check_banks(ds, long_bank, shared_bank)
    nu = cfg.step_length
    M = max(cfg.mstop_l, cfg.mstop_ls)

    design_l = Design.longitudinal(ds)
    design_ls = Design.shared(ds)
    prep_l = long_bank.prepare(design_l) if cfg.mstop_l > 0 else None
    prep_ls = shared_bank.prepare(design_ls) if cfg.mstop_ls > 0 else None

    # the random-effects guard keeps clear of longitudinal covariates in the model
    guard_long = row_functionals(design_ls, ds.x_long) if prep_ls is not None else None
    active_long: list[int] = []
    active_shared: list[int] = []
    top_long: list[int] = []
    guard = _guard_of(shared_bank)

    state, sigma2 = initial_state(ds)
    nuisance = NuisanceParams(sigma2, cfg.alpha_offset, cfg.lambda0_offset)

    path_long = np.zeros((M + 1, 1 + ds.p_long))
    path_shared = np.zeros((M + 1, 2 + ds.p_shared))
    nuis_trace = np.zeros((M + 1, 3))
    ll_trace = np.zeros(M + 1)
    sel_long, sel_shared = [], []

    def record(m):
        path_long[m, 0] = state.intercept_l
        path_long[m, 1:] = state.beta_l
        path_shared[m, 0] = state.intercept_ls
        path_shared[m, 1:-1] = state.beta_ls
        path_shared[m, -1] = state.beta_t
        nuis_trace[m] = (nuisance.sigma2, nuisance.alpha, nuisance.lambda0)
        try:
            ll_trace[m] = log_likelihood(ds, state, nuisance)
        except HazardOverflowError:
            ll_trace[m] = -np.inf

    record(0)
    if callback is not None:
        callback(0, state, nuisance)

    for m in range(1, M + 1):
        stage = "longitudinal"
        try:
            if m <= cfg.mstop_l:
                u = gradient_l(ds, state, nuisance)
                if cfg.gradient_scaling == "fisher":
                    u = u * nuisance.sigma2
                act_l = [k for k, lr in enumerate(long_bank) if lr.covariate_index in active_long]
                sse_l = prep_l.sse(u, act_l, entry_level=cfg.entry_level_l)
                if not np.isfinite(sse_l).any():
                    raise FitError("no longitudinal learner is eligible for selection")
                j = int(np.argmin(sse_l))
                learner, _ = prep_l.fit(j, u)
                sel_long.append(j)
                if guard is not None:
                    free = [k for k, lr in enumerate(long_bank) if lr.covariate_index not in active_long]
                    uc = u - u.mean()
                    gain = float(uc @ uc) - sse_l[free]
                    keep = strong_candidates(gain, null_gain_scale(uc), guard.guard_level, guard.guard_top)
                    top_long = [long_bank[free[k]].covariate_index for k in keep]
                col = learner.covariate_index
                if col not in active_long:
                    active_long.append(col)
                state.intercept_l += nu * learner.intercept
                state.beta_l[col] += nu * learner.slope
                state.eta_l += nu * (learner.intercept + learner.slope * ds.x_long[:, col])

            stage = "shared"
            if m <= cfg.mstop_ls:
                u = gradient_ls(ds, state, nuisance, cfg.survival_weighting)
                if cfg.gradient_scaling == "fisher":
                    u = u * nuisance.sigma2
                cols = active_long + [c for c in top_long if c not in active_long]
                extra = (guard_long[0][:, cols], guard_long[1][:, cols])
                j, learner, _ = prep_ls.select_best(u, active_shared, extra, (state.gamma0, state.gamma1),
                                                  cfg.entry_level_ls, constant_within=True)
                sel_shared.append(j)
                if j not in active_shared:
                    active_shared.append(j)
                _apply_shared(ds, state, learner, nu)

            stage = "nuisance"
            nuisance = update_nuisance(ds, state, nuisance, freeze_survival=m > cfg.mstop_ls)
        except (HazardOverflowError, FitError, FloatingPointError, ValueError) as exc:
            raise BoostingError(f"iteration {m}, {stage} step: {exc}") from exc

        if check_every and m % check_every == 0:
            state.check_decomposition(ds)
        record(m)
        if callback is not None:
            callback(m, state, nuisance)

    m_s2, m_cov = marginal_components(ds, state, nuisance)
    return FitResult(
        config=cfg, state=state, nuisance=nuisance, train_ids=np.asarray(ds.ids).copy(),
        names_long=ds.names_long, names_shared=ds.names_shared,
        bank_names_long=long_bank.names, bank_names_shared=shared_bank.names,
        path_long=path_long, path_shared=path_shared, selected_long=sel_long, selected_shared=sel_shared,
        loglik_trace=ll_trace, nuisance_trace=nuis_trace, manifest=manifest,
        marginal_sigma2=m_s2, marginal_cov=m_cov,
    )


def _guard_of(bank: LearnerBank) -> Optional[RandomEffectsLearner]:
    for lr in bank:
        if isinstance(lr, RandomEffectsLearner) and lr.guard:
            return lr
    return None


def _apply_shared(ds: JointDataset, state: PredictorState, learner, nu: float):
    if isinstance(learner, LinearLearner):
        col = learner.covariate_index
        shift = nu * (learner.intercept + learner.slope * ds.x_shared[:, col])
        state.intercept_ls += nu * learner.intercept
        state.beta_ls[col] += nu * learner.slope
        state.eta_ls_timefree += shift
        state.eta_ls += shift[ds.group]
    elif isinstance(learner, TimeLearner):
        state.intercept_ls += nu * learner.intercept
        state.beta_t += nu * learner.slope
        state.eta_ls_timefree += nu * learner.intercept
        state.eta_ls += nu * (learner.intercept + learner.slope * ds.time)
    elif isinstance(learner, RandomEffectsLearner):
        g0, g1 = nu * learner.gamma0, nu * learner.gamma1
        state.gamma0 += g0
        state.gamma1 += g1
        state.eta_ls_timefree += g0
        state.eta_ls += g0[ds.group] + g1[ds.group] * ds.time
    else:
        raise TypeError(f"unsupported shared learner {type(learner).__name__}")


def _random_effects_for(train_ids, state: PredictorState, ids) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.clip(np.searchsorted(train_ids, ids), 0, len(train_ids) - 1)
    seen = train_ids[pos] == ids
    g0 = np.where(seen, state.gamma0[pos], 0.0)
    g1 = np.where(seen, state.gamma1[pos], 0.0)
    return g0, g1


def predict_longitudinal(fit_result: FitResult, ids, time, x_long, x_shared) -> np.ndarray:
    """``eta_l + eta_ls`` for new rows on the fitting scale.

    ``x_shared`` is given per row. Individuals unknown to the fit get zero
    random effects.
    """
    x_long = np.atleast_2d(np.asarray(x_long, dtype=float))
    x_shared = np.atleast_2d(np.asarray(x_shared, dtype=float))
    time = np.asarray(time, dtype=float)
    st = fit_result.state
    if x_long.shape[1] != st.beta_l.size or x_shared.shape[1] != st.beta_ls.size:
        raise ValueError(
            f"covariate arity mismatch: model has ({st.beta_l.size}, {st.beta_ls.size}), "
            f"data has ({x_long.shape[1]}, {x_shared.shape[1]})"
        )
    g0, g1 = _random_effects_for(fit_result.train_ids, st, ids)
    eta_l = st.intercept_l + x_long @ st.beta_l
    eta_ls = st.intercept_ls + x_shared @ st.beta_ls + g0 + (st.beta_t + g1) * time
    return eta_l + eta_ls


def state_on(ds: JointDataset, train_ids, state: PredictorState) -> PredictorState:
    """Evaluate a (possibly intermediate) fitted state on another dataset."""
    if ds.p_long != state.beta_l.size or ds.p_shared != state.beta_ls.size:
        raise ValueError(
            f"covariate arity mismatch: model has ({state.beta_l.size}, {state.beta_ls.size}), "
            f"data has ({ds.p_long}, {ds.p_shared})"
        )
    g0, g1 = _random_effects_for(np.asarray(train_ids), state, ds.ids)
    return PredictorState.from_coefficients(ds, state.intercept_l, state.beta_l, state.intercept_ls,
                                            state.beta_ls, state.beta_t, gamma0=g0, gamma1=g1)


UNSEEN_MODES = ("marginal", "zero")


def random_effects_cov(state: PredictorState) -> np.ndarray:
    """Second-moment matrix of the fitted (intercept, slope) random effects."""
    g = np.column_stack([state.gamma0, state.gamma1])
    if len(g) == 0:
        return np.zeros((2, 2))
    return g.T @ g / len(g)


def _individual_moments(ds: JointDataset, resid):
    """Per-individual ``n_i``, ``Z'Z``, ``Z'r`` and ``r'r`` for ``Z = [1, t]``."""
    g, t, N = ds.group, ds.time, ds.N
    n = np.bincount(g, minlength=N).astype(float)
    st = np.bincount(g, weights=t, minlength=N)
    stt = np.bincount(g, weights=t * t, minlength=N)
    zr = np.column_stack([np.bincount(g, weights=resid, minlength=N),
                          np.bincount(g, weights=t * resid, minlength=N)])
    rr = np.bincount(g, weights=resid * resid, minlength=N)
    ztz = np.empty((N, 2, 2))
    ztz[:, 0, 0], ztz[:, 0, 1], ztz[:, 1, 0], ztz[:, 1, 1] = n, st, st, stt
    return n, ztz, zr, rr


def marginal_gaussian(ds: JointDataset, resid, sigma2: float, cov: np.ndarray):
    """Per-individual marginal Gaussian log-likelihood and empirical-Bayes effects.

    ``resid`` are the responses minus the fixed part of both predictors. The
    individual's rows are normal with covariance ``Z cov Z' + sigma2 I`` for
    ``Z = [1, t]``; the returned effects are the conditional means of the
    random effects given those rows.
    """
    n, ztz, zr, rr = _individual_moments(ds, resid)
    M = sigma2 * np.eye(2) + cov @ ztz  # (N, 2, 2)
    czr = zr @ cov.T  # cov @ Z'r per individual
    ghat = np.linalg.solve(M, czr[:, :, None])[:, :, 0]
    quad = (rr - np.einsum("ij,ij->i", zr, ghat)) / sigma2
    _, logdet_m = np.linalg.slogdet(M)
    logdet_v = (n - 2.0) * np.log(sigma2) + logdet_m
    ll = -0.5 * (n * np.log(2.0 * np.pi) + logdet_v + quad)
    return ll, ghat[:, 0], ghat[:, 1]


def fixed_part_residual(ds: JointDataset, state: PredictorState) -> np.ndarray:
    """Responses minus both predictors without the random effects."""
    re = state.gamma0[ds.group] + state.gamma1[ds.group] * ds.time
    return ds.y - state.eta_l - state.eta_ls + re


def variance_components(ds: JointDataset, resid, sigma2: float, cov: np.ndarray,
                        max_iter: int = 500, tol: float = 1e-8) -> tuple[float, np.ndarray]:
    """Maximum-likelihood ``(sigma2, cov)`` of the marginal Gaussian model by EM.

    ``resid`` holds the responses minus the fixed part; ``sigma2`` and
    ``cov`` are starting values. The boosted random effects are shrunk and
    the residual variance next to them too small, so a model for new
    individuals needs these re-estimated.
    """
    n, ztz, zr, rr = _individual_moments(ds, resid)
    total = float(n.sum())
    cov = np.asarray(cov, dtype=float) + 1e-6 * np.eye(2)
    for _ in range(max_iter):
        prec = ztz / sigma2 + np.linalg.inv(cov)[None]
        post = np.linalg.inv(prec)  # posterior covariance per individual
        m = np.einsum("nij,nj->ni", post, zr) / sigma2
        new_cov = (np.einsum("ni,nj->ij", m, m) + post.sum(axis=0)) / ds.N
        fit_sq = rr - 2.0 * np.einsum("ni,ni->n", m, zr) + np.einsum("ni,nij,nj->n", m, ztz, m)
        new_s2 = float((fit_sq + np.einsum("nij,nji->n", post, ztz)).sum()) / total
        done = abs(new_s2 - sigma2) <= tol * sigma2 and np.max(np.abs(new_cov - cov)) <= tol * max(1.0, np.max(np.abs(cov)))
        sigma2, cov = new_s2, new_cov
        if done:
            break
    return sigma2, cov


def risk_of(ds: JointDataset, train_ids, state: PredictorState, nuisance: NuisanceParams,
            unseen: str = "marginal", components: Optional[tuple[float, np.ndarray]] = None) -> float:
    """Negative joint log-likelihood of ``ds`` under a fitted state.

    Individuals of the training set keep their fitted random effects. For
    the others, ``unseen="zero"`` sets the random effects to zero, while
    ``"marginal"`` integrates them out of the longitudinal factor and
    evaluates the survival factor at their conditional means. The marginal
    model uses ``components = (sigma2, cov)`` when given (see
    :func:`variance_components`), else the fitted ``sigma2`` and the second
    moments of the fitted effects.
    """
    if unseen not in UNSEEN_MODES:
        raise ValueError(f"unseen must be one of {UNSEEN_MODES}, got {unseen!r}")
    on = state_on(ds, train_ids, state)
    new = ~np.isin(ds.ids, np.asarray(train_ids))
    if unseen == "zero" or not new.any():
        return -log_likelihood(ds, on, nuisance)
    s2 = nuisance.sigma2
    m_s2, m_cov = components if components is not None else (s2, random_effects_cov(state))
    resid = ds.y - on.eta_l - on.eta_ls  # unseen rows carry no random effects yet
    ll_marg, e0, e1 = marginal_gaussian(ds, resid, m_s2, m_cov)
    g0 = np.where(new, e0, on.gamma0)
    g1 = np.where(new, e1, on.gamma1)
    full = PredictorState.from_coefficients(ds, state.intercept_l, state.beta_l, state.intercept_ls,
                                            state.beta_ls, state.beta_t, gamma0=g0, gamma1=g1)
    _, surv = log_likelihood_parts(ds, full, nuisance)
    old_rows = ~new[ds.group]
    r_old = resid[old_rows]
    gauss_old = -0.5 * r_old.size * np.log(2.0 * np.pi * s2) - 0.5 * float(r_old @ r_old) / s2
    return -float(gauss_old + ll_marg[new].sum() + surv.sum())


def marginal_components(ds: JointDataset, state: PredictorState, nuisance: NuisanceParams):
    """Variance components for new individuals, estimated on the training data ``ds``."""
    return variance_components(ds, fixed_part_residual(ds, state), nuisance.sigma2, random_effects_cov(state))


def evaluate_risk(fit_result: FitResult, eval_ds: JointDataset, unseen: str = "marginal") -> float:
    """Predictive risk: negative joint log-likelihood of ``eval_ds``.

    ``eval_ds`` must be on the fitting scale (apply the training manifest).
    See :func:`risk_of` for the treatment of individuals not in the fit.
    """
    comp = None
    if fit_result.marginal_sigma2 is not None:
        comp = (fit_result.marginal_sigma2, np.asarray(fit_result.marginal_cov))
    return risk_of(eval_ds, fit_result.train_ids, fit_result.state, fit_result.nuisance, unseen, comp)
