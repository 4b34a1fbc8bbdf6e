"""Component-wise base-learners fitted by least squares to a gradient vector.

A :class:`LearnerBank` is an ordered list of learner descriptions for one
sub-predictor. ``bank.prepare(design)`` precomputes everything that does not
depend on the gradient, so each boosting iteration costs one matrix-vector
product for all linear learners together.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.stats import chi2

from boostjm.data import JointDataset

DEFAULT_RE_DF = 4.0


@dataclass(frozen=True)
class Design:
    """Row-level inputs of one sub-predictor.

    ``group`` indexes the individual of each row among ``n_groups`` fitted
    individuals; ``-1`` marks an individual without random effects.
    """

    x: np.ndarray
    time: np.ndarray
    group: np.ndarray
    n_groups: int

    @classmethod
    def longitudinal(cls, ds: JointDataset) -> "Design":
        return cls(ds.x_long, ds.time, ds.group, ds.N)

    @classmethod
    def shared(cls, ds: JointDataset) -> "Design":
        # shared covariates are constant per individual: expand to rows
        return cls(ds.x_shared[ds.group], ds.time, ds.group, ds.N)

    @property
    def rows(self) -> int:
        return len(self.time)


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class LinearLearner:
    """``h(x) = intercept + slope * x_j`` on one covariate column."""

    covariate_index: int
    intercept: float = 0.0
    slope: float = 0.0
    kind = "linear"

    def fit(self, u, design: Design):
        x = _column(design, self.covariate_index)
        a, b, sse = simple_regression(x, u)
        return replace(self, intercept=a, slope=b), sse

    def predict(self, design: Design) -> np.ndarray:
        return self.intercept + self.slope * _column(design, self.covariate_index)


@dataclass(frozen=True)
class TimeLearner:
    """Linear effect of time, ``h(t) = intercept + slope * t``."""

    intercept: float = 0.0
    slope: float = 0.0
    kind = "time"

    def fit(self, u, design: Design):
        a, b, sse = simple_regression(design.time, u)
        return replace(self, intercept=a, slope=b), sse

    def predict(self, design: Design) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(design.time, dtype=float)


@dataclass(frozen=True)
class RandomEffectsLearner:
    """Per-individual random intercept and slope fitted by ridge regression.

    Minimizes ``sum_ij (u_ij - g0_i - g1_i t_ij)^2 + penalty * sum_i (g0_i^2 + g1_i^2)``.
    When ``penalty`` is None it is chosen so that the trace of the hat
    matrix equals ``df`` on the design the learner is prepared for.

    A random intercept can mimic any individual-constant covariate, so a
    competing random-effects learner would absorb covariate effects before
    their own learners are ever selected. With ``guard`` on, a fit inside a
    :class:`PreparedBank` is constrained to effects that are centred and
    uncorrelated, over individuals, with the shared covariates already
    selected and the ``guard_top`` strongest unselected ones on the current
    gradient. Extra constraints (see :func:`row_functionals`) can be
    supplied by the caller.

    Repeated ridge steps on residuals converge to per-individual least
    squares. With ``penalized_steps`` the step also carries the derivative
    of the ridge penalty at the current effects, so the accumulated effects
    settle at the penalized solution instead, and the learner competes with
    the sum of squares of that step. Its gain then fades once the effects
    have settled. Under the guard they settle at the projection of the
    penalized solution onto the constraints, including any part absorbed
    before a constraint was added.
    """

    penalty: Optional[float] = None
    df: float = DEFAULT_RE_DF
    guard: bool = True
    guard_top: int = 2
    guard_level: Optional[float] = None
    penalized_steps: bool = True
    gamma0: Optional[np.ndarray] = None
    gamma1: Optional[np.ndarray] = None
    kind = "random"

    def resolve_penalty(self, design: Design) -> float:
        if self.penalty is not None:
            if self.penalty < 0:
                raise FitError("random-effects penalty must be nonnegative")
            return float(self.penalty)
        return penalty_for_df(design, self.df)

    def fit(self, u, design: Design):
        lam = self.resolve_penalty(design)
        inv = _re_inverse(design, lam)
        g0, g1 = _re_solve(inv, design, np.asarray(u, dtype=float))
        fitted = replace(self, penalty=lam, gamma0=g0, gamma1=g1)
        resid = u - fitted.predict(design)
        return fitted, float(resid @ resid)

    def predict(self, design: Design) -> np.ndarray:
        if self.gamma0 is None:
            raise FitError("random-effects learner is not fitted")
        g = np.asarray(design.group)
        seen = (g >= 0) & (g < len(self.gamma0))
        out = np.zeros(len(g))
        out[seen] = self.gamma0[g[seen]] + self.gamma1[g[seen]] * np.asarray(design.time)[seen]
        return out


Learner = Union[LinearLearner, TimeLearner, RandomEffectsLearner]


def _column(design: Design, j: int) -> np.ndarray:
    if design.x.ndim != 2 or not 0 <= j < design.x.shape[1]:
        raise FitError(f"covariate index {j} outside design with {design.x.shape[1]} columns")
    return design.x[:, j]


def simple_regression(x, u) -> tuple[float, float, float]:
    """Least-squares intercept, slope and residual sum of squares of ``u`` on ``x``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != u.shape:
        raise FitError(f"gradient length {u.shape} does not match design rows {x.shape}")
    if not np.all(np.isfinite(u)):
        raise FitError("gradient contains non-finite values")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if not sxx > 0:
        raise FitError("covariate is constant; simple regression is rank deficient")
    uc = u - u.mean()
    b = float(xc @ uc) / sxx
    a = float(u.mean() - b * x.mean())
    resid = uc - b * xc
    return a, b, float(resid @ resid)


def _re_moments(design: Design):
    g, t, N = design.group, np.asarray(design.time, dtype=float), design.n_groups
    n = np.bincount(g, minlength=N).astype(float)
    st = np.bincount(g, weights=t, minlength=N)
    stt = np.bincount(g, weights=t * t, minlength=N)
    return n, st, stt


def _re_inverse(design: Design, lam: float) -> np.ndarray:
    n, st, stt = _re_moments(design)
    A = np.empty((design.n_groups, 2, 2))
    A[:, 0, 0] = n + lam
    A[:, 0, 1] = A[:, 1, 0] = st
    A[:, 1, 1] = stt + lam
    if lam > 0:
        return np.linalg.inv(A)
    return np.linalg.pinv(A)


def _re_solve(inv, design: Design, u):
    g, t, N = design.group, np.asarray(design.time, dtype=float), design.n_groups
    su = np.bincount(g, weights=u, minlength=N)
    stu = np.bincount(g, weights=t * u, minlength=N)
    g0 = inv[:, 0, 0] * su + inv[:, 0, 1] * stu
    g1 = inv[:, 1, 0] * su + inv[:, 1, 1] * stu
    return g0, g1


def re_degrees_of_freedom(design: Design, lam: float) -> float:
    """Trace of the random-effects hat matrix at penalty ``lam``."""
    n, st, stt = _re_moments(design)
    tr = n + stt
    det = n * stt - st * st
    # eigenvalues e of Z'Z per individual: sum e/(e+lam) = (tr*lam + 2*det)/(lam^2 + tr*lam + det)
    return float(np.sum((tr * lam + 2.0 * det) / (lam * lam + tr * lam + det)))


def penalty_for_df(design: Design, df: float) -> float:
    """Ridge penalty whose hat-matrix trace equals ``df``."""
    n, st, stt = _re_moments(design)
    rank = float(np.sum(n >= 1) + np.sum(n * stt - st * st > 1e-12 * np.maximum(n * stt, 1.0)))
    if not 0 < df < rank:
        raise FitError(f"random-effects df must lie in (0, {rank:g}), got {df}")
    f = lambda loglam: re_degrees_of_freedom(design, float(np.exp(loglam))) - df
    lo, hi = -30.0, 60.0
    return float(np.exp(brentq(f, lo, hi, xtol=1e-12)))


def row_functionals(design: Design, columns) -> tuple[np.ndarray, np.ndarray]:
    """Per-individual sums of each column and of column times time.

    For random effects ``(g0, g1)`` the row-level inner product of
    ``g0[group] + g1[group] * time`` with a column equals
    ``g0 @ a + g1 @ b`` for the returned ``(a, b)``.
    """
    cols = np.asarray(columns, dtype=float).reshape(design.rows, -1)
    t, g = np.asarray(design.time, dtype=float), design.group
    a = np.zeros((design.n_groups, cols.shape[1]))
    b = np.zeros((design.n_groups, cols.shape[1]))
    np.add.at(a, g, cols)
    np.add.at(b, g, cols * t[:, None])
    return a, b


def orthogonalize_effects(g0, g1, a, b):
    """Closest ``(g0, g1)`` with ``g0 @ a[:, k] + g1 @ b[:, k] = 0`` for every k.

    The constraints are linear functionals of the stacked effects; the
    correction is the orthogonal projection onto their joint null space.
    """
    if a.shape[1] == 0:
        return g0, g1
    M = np.vstack([a, b])
    v = np.concatenate([g0, g1])
    coef, *_ = np.linalg.lstsq(M, v, rcond=None)
    v = v - M @ coef
    n = len(g0)
    return v[:n], v[n:]


def strong_candidates(gain, scale: float, level: Optional[float] = 0.05, top: int = 2) -> list[int]:
    """Positions of at most ``top`` gains lying far beyond chance level.

    ``scale`` is the expected gain of a covariate unrelated to the gradient,
    around which such gains spread like a scaled chi-square(1); a gain counts
    as strong above the Bonferroni quantile at ``level``. With ``level=None``
    the ``top`` largest positive gains are returned. Strongest first.
    """
    gain = np.asarray(gain, dtype=float)
    if top <= 0 or gain.size == 0:
        return []
    cut = 0.0 if level is None else scale * chi2.isf(level / gain.size, 1)
    order = np.argsort(-gain, kind="stable")[:top]
    return [int(k) for k in order if gain[k] > cut]


def null_gain_scale(uc, group=None) -> float:
    """Expected gain of a covariate independent of the centred gradient ``uc``.

    Without ``group`` the covariate varies freely over rows; with it the
    covariate is constant within each group, so gains follow group sums.
    """
    uc = np.asarray(uc, dtype=float)
    if group is None:
        return float(uc @ uc) / uc.size
    sums = np.bincount(group, weights=uc)
    return float(sums @ sums) / uc.size


class LearnerBank:
    """Ordered, immutable list of base-learner descriptions."""

    def __init__(self, learners: Sequence[Learner], names: Optional[Sequence[str]] = None):
        learners = list(learners)
        if not learners:
            raise ValueError("a learner bank needs at least one learner")
        idx = [lr.covariate_index for lr in learners if isinstance(lr, LinearLearner)]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate covariate index in bank")
        if sum(isinstance(lr, TimeLearner) for lr in learners) > 1:
            raise ValueError("at most one time learner per bank")
        if sum(isinstance(lr, RandomEffectsLearner) for lr in learners) > 1:
            raise ValueError("at most one random-effects learner per bank")
        self.learners = tuple(learners)
        if names is None:
            names = [_default_name(lr) for lr in learners]
        self.names = tuple(names)

    def __len__(self):
        return len(self.learners)

    def __getitem__(self, j):
        return self.learners[j]

    def prepare(self, design: Design) -> "PreparedBank":
        return PreparedBank(self, design)

    def select_best(self, u, design: Design):
        """Fit every learner to ``u``; return ``(j*, fitted learner, sse)``."""
        return self.prepare(design).select_best(u)


def _default_name(lr) -> str:
    if isinstance(lr, LinearLearner):
        return f"x{lr.covariate_index}"
    return lr.kind


class PreparedBank:
    """A bank bound to one design, with gradient-independent work cached."""

    def __init__(self, bank: LearnerBank, design: Design):
        self.bank = bank
        self.design = design
        self.linear_pos = np.array([j for j, lr in enumerate(bank) if isinstance(lr, LinearLearner)], dtype=int)
        cols = [bank[j].covariate_index for j in self.linear_pos]
        if cols:
            if design.x.ndim != 2 or max(cols) >= design.x.shape[1]:
                raise FitError("bank refers to covariates missing from the design")
            X = design.x[:, cols]
            self.means = X.mean(axis=0)
            self.xc = X - self.means
            self.sxx = np.einsum("ij,ij->j", self.xc, self.xc)
            if np.any(~(self.sxx > 0)):
                bad = int(np.asarray(cols)[~(self.sxx > 0)][0])
                raise FitError(f"covariate {bad} is constant; simple regression is rank deficient")
        self.other_pos = [j for j, lr in enumerate(bank) if not isinstance(lr, LinearLearner)]
        self._guard_cols = None
        self.re_inv = None
        self.re_penalty = None
        self.re_guard = False
        self.guard_top = 0
        for j in self.other_pos:
            lr = bank[j]
            if isinstance(lr, RandomEffectsLearner):
                self.re_penalty = lr.resolve_penalty(design)
                self.re_inv = _re_inverse(design, self.re_penalty)
                self.re_guard = lr.guard
                self.guard_top = lr.guard_top
                self.guard_level = lr.guard_level
                n_ind = design.n_groups
                first = np.zeros(n_ind, dtype=int)
                first[design.group[::-1]] = np.arange(design.rows)[::-1]
                self.x_ind = design.x[first]  # shared covariates per individual
                self.base_a = np.column_stack([np.ones(n_ind), np.zeros(n_ind)])
                self.base_b = np.column_stack([np.zeros(n_ind), np.ones(n_ind)])
            elif isinstance(lr, TimeLearner):
                t = np.asarray(design.time, dtype=float)
                self.tmean = t.mean()
                self.tc = t - self.tmean
                self.stt = float(self.tc @ self.tc)
                if not self.stt > 0:
                    raise FitError("time is constant; time learner is rank deficient")

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.design.rows,):
            raise FitError(f"gradient length {u.shape} does not match design rows {self.design.rows}")
        if not np.all(np.isfinite(u)):
            raise FitError("gradient contains non-finite values")
        return u

    def sse(self, u, active=(), extra=None, current=None, entry_level=None,
            constant_within=False) -> np.ndarray:
        """Residual sum of squares of every learner fitted to ``u``.

        ``active`` lists bank positions already selected and ``extra`` holds
        additional ``(a, b)`` guard columns for a guarded random-effects
        learner. With ``entry_level`` set, a linear learner outside
        ``active`` whose gain does not clear the chance cut (see
        :func:`strong_candidates`) gets an infinite sum of squares, so it
        cannot enter. ``constant_within`` says the covariates are constant
        within individuals, which sets the chance scale.
        """
        u = self._check(u)
        out = np.empty(len(self.bank))
        uc = u - u.mean()
        suu = float(uc @ uc)
        self._total = suu
        if self.re_guard or entry_level is not None:
            self._null = null_gain_scale(self._null_reference(u, uc, current),
                                         self.design.group if constant_within or self.re_guard else None)
        if len(self.linear_pos):
            sxu = self.xc.T @ uc
            out[self.linear_pos] = np.maximum(suu - sxu * sxu / self.sxx, 0.0)
        # the guard ranks candidates before any of them is closed
        self._guard_cols = self._guard(out, active, extra)
        if len(self.linear_pos) and entry_level is not None:
            taken = set(active)
            new = np.array([j not in taken for j in self.linear_pos])
            if new.any():
                cut = self._null * chi2.isf(entry_level / new.sum(), 1)
                closed = new & (suu - out[self.linear_pos] <= cut)
                out[self.linear_pos[closed]] = np.inf
        for j in self.other_pos:
            fitted, out[j] = self._fit_other(j, u, uc)
            if isinstance(fitted, RandomEffectsLearner) and fitted.penalized_steps and current is not None:
                step = self._penalized_step(fitted, u, current).predict(self.design)
                out[j] = float((u - step) @ (u - step))
        return out

    def _null_reference(self, u, uc, current):
        # Chance gains are judged against the gradient before the accumulated
        # random effects took their share; otherwise guarded directions, which
        # the effects may not absorb, look inflated relative to all others.
        if current is None or self.re_inv is None:
            return uc
        g, t = self.design.group, np.asarray(self.design.time, dtype=float)
        ref = u + np.asarray(current[0], dtype=float)[g] + np.asarray(current[1], dtype=float)[g] * t
        return ref - ref.mean()

    def _guard(self, sse, active, extra):
        if self.re_inv is None or not self.re_guard:
            return None
        cols = {self.bank[j].covariate_index for j in active if isinstance(self.bank[j], LinearLearner)}
        cols |= set(self._strong_candidates(sse, cols))
        xs = self.x_ind[:, sorted(cols)]
        zero = np.zeros_like(xs)
        # intercepts and slopes are each uncorrelated with every guarded covariate
        a = [self.base_a, xs, zero]
        b = [self.base_b, zero, xs]
        if extra is not None:
            a.append(extra[0])
            b.append(extra[1])
        return np.hstack(a), np.hstack(b)

    def _strong_candidates(self, sse, taken):
        free = np.array([k for k, j in enumerate(self.linear_pos)
                         if self.bank[j].covariate_index not in taken], dtype=int)
        gain = self._total - sse[self.linear_pos[free]]
        keep = strong_candidates(gain, self._null, self.guard_level, self.guard_top)
        return [self.bank[self.linear_pos[free[k]]].covariate_index for k in keep]

    def _fit_other(self, j, u, uc):
        lr = self.bank[j]
        if isinstance(lr, TimeLearner):
            b = float(self.tc @ uc) / self.stt
            a = float(u.mean() - b * self.tmean)
            resid = uc - b * self.tc
            return replace(lr, intercept=a, slope=b), float(resid @ resid)
        g0, g1 = _re_solve(self.re_inv, self.design, u)
        if self._guard_cols is not None:
            g0, g1 = orthogonalize_effects(g0, g1, *self._guard_cols)
        fitted = replace(lr, penalty=self.re_penalty, gamma0=g0, gamma1=g1)
        resid = u - fitted.predict(self.design)
        return fitted, float(resid @ resid)

    def fit(self, j: int, u, active=(), extra=None):
        """Fit learner ``j`` to ``u``; returns ``(fitted learner, sse)``."""
        u = self._check(u)
        if j in self.other_pos and self.re_guard:
            self.sse(u, active, extra)
        lr = self.bank[j]
        if isinstance(lr, LinearLearner):
            k = int(np.searchsorted(self.linear_pos, j))
            uc = u - u.mean()
            b = float(self.xc[:, k] @ uc) / self.sxx[k]
            a = float(u.mean() - b * self.means[k])
            resid = uc - b * self.xc[:, k]
            return replace(lr, intercept=a, slope=b), float(resid @ resid)
        return self._fit_other(j, u, u - u.mean())

    def select_best(self, u, active=(), extra=None, current=None, entry_level=None,
                    constant_within=False):
        """Best learner for ``u``: ``(j*, fitted learner, sse)``.

        ``current`` holds the accumulated random effects ``(g0, g1)``, used
        for penalized random-effects steps; see :meth:`sse` for the rest.
        """
        sse = self.sse(u, active, extra, current, entry_level, constant_within)
        if not np.isfinite(sse).any():
            raise FitError("no learner is eligible for selection")
        j = int(np.argmin(sse))  # first minimum: ties go to the lowest index
        if j in self.other_pos:
            u = self._check(u)
            fitted, _ = self._fit_other(j, u, u - u.mean())
            if isinstance(fitted, RandomEffectsLearner) and fitted.penalized_steps and current is not None:
                fitted = self._penalized_step(fitted, u, current)
        else:
            fitted, _ = self.fit(j, u)
        return j, fitted, float(sse[j])

    def _penalized_step(self, fitted, u, current):
        lam = self.re_penalty
        c0, c1 = (np.asarray(c, dtype=float) for c in current)
        # ridge solve of Z'u - lam * current instead of Z'u
        g, t, N = self.design.group, np.asarray(self.design.time, dtype=float), self.design.n_groups
        su = np.bincount(g, weights=u, minlength=N) - lam * c0
        stu = np.bincount(g, weights=t * u, minlength=N) - lam * c1
        inv = self.re_inv
        g0 = inv[:, 0, 0] * su + inv[:, 0, 1] * stu
        g1 = inv[:, 1, 0] * su + inv[:, 1, 1] * stu
        if self._guard_cols is not None:
            # The step aims at the ridge fit of u + Z*current. Constraining
            # that target rather than the step lets effects absorbed before a
            # constraint applied flow back into the gradient.
            t0, t1 = orthogonalize_effects(g0 + c0, g1 + c1, *self._guard_cols)
            g0, g1 = t0 - c0, t1 - c1
        return replace(fitted, gamma0=g0, gamma1=g1)


def default_banks(ds: JointDataset, re_penalty: Optional[float] = 1.0, re_df: float = DEFAULT_RE_DF,
                  re_guard: bool = True) -> tuple[LearnerBank, LearnerBank]:
    """One linear learner per covariate; the shared bank adds time and random effects."""
    long_bank = LearnerBank([LinearLearner(j) for j in range(ds.p_long)], names=ds.names_long)
    shared = [LinearLearner(j) for j in range(ds.p_shared)]
    shared += [TimeLearner(), RandomEffectsLearner(penalty=re_penalty, df=re_df, guard=re_guard)]
    shared_bank = LearnerBank(shared, names=list(ds.names_shared) + ["time", "random"])
    return long_bank, shared_bank
