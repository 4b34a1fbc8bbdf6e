"""Two-dimensional early stopping over ``(mstop_l, mstop_ls)`` grids.

A fit with stopping pair ``(a, b)`` is a prefix of longer fits. Its state
after its last iteration equals

* iteration ``b`` of the fit ``(a, max_ls)`` when ``b >= a``, and
* iteration ``a`` of the fit ``(max_l, b)`` when ``a >= b``,

because the two runs perform identical updates up to that iteration. One
fit per grid value on each axis therefore covers the whole surface, with
risks read off at checkpoints.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from boostjm.baselearners import LearnerBank
from boostjm.data import JointDataset, kfold_splits, split_holdout
from boostjm.engine import BoostConfig, fit, marginal_components, risk_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    mstop_l: tuple
    mstop_ls: tuple
    rounds: int = 0

    def __post_init__(self):
        for name in ("mstop_l", "mstop_ls"):
            axis = tuple(int(v) for v in getattr(self, name))
            if not axis:
                raise ValueError(f"{name} axis is empty")
            if min(axis) < 1:
                raise ValueError(f"{name} values must be at least 1")
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValueError(f"{name} values must be strictly increasing")
            object.__setattr__(self, name, axis)
        if self.rounds < 0:
            raise ValueError("refinement rounds must be nonnegative")

    @classmethod
    def regular(cls, start: int, stop: int, step: int, rounds: int = 0,
                start_ls: Optional[int] = None, stop_ls: Optional[int] = None,
                step_ls: Optional[int] = None) -> "GridSpec":
        """Equally spaced axes ``start..stop`` (inclusive); the shared axis defaults to the same."""
        return cls(_axis(start, stop, step),
                   _axis(start if start_ls is None else start_ls,
                         stop if stop_ls is None else stop_ls,
                         step if step_ls is None else step_ls), rounds)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.mstop_l), len(self.mstop_ls)


def _axis(start, stop, step) -> tuple:
    if step < 1 or stop < start:
        raise ValueError(f"invalid grid range {start}:{stop}:{step}")
    return tuple(range(int(start), int(stop) + 1, int(step)))


DEFAULT_GRID = GridSpec.regular(30, 300, 30, rounds=1)


@dataclass(frozen=True)
class Holdout:
    fraction: float = 2 / 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError(f"holdout training fraction must lie in (0, 1), got {self.fraction}")


@dataclass(frozen=True)
class KFold:
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k-fold cross-validation needs k >= 2, got {self.k}")


@dataclass(frozen=True)
class EvalSet:
    """A separate evaluation dataset on the fitting scale."""

    data: JointDataset


Method = Union[Holdout, KFold, EvalSet]


@dataclass
class TuneResult:
    grid: GridSpec
    surface: np.ndarray
    chosen: tuple
    fold_surfaces: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def risk(self) -> float:
        i = self.grid.mstop_l.index(self.chosen[0])
        j = self.grid.mstop_ls.index(self.chosen[1])
        return float(self.surface[i, j])

    def surface_csv(self) -> str:
        """Risk surface with one row per ``mstop_l`` and one column per ``mstop_ls``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mstop_l"] + [str(v) for v in self.grid.mstop_ls])
        for a, row in zip(self.grid.mstop_l, self.surface):
            w.writerow([str(a)] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "chosen": {"mstop_l": self.chosen[0], "mstop_ls": self.chosen[1]},
            "risk": self.risk,
            "grid": {"mstop_l": list(self.grid.mstop_l), "mstop_ls": list(self.grid.mstop_ls)},
            "surface": self.surface.tolist(),
            "fold_surfaces": [s.tolist() for s in self.fold_surfaces],
            "history": [h.to_dict() for h in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def argmin_cell(surface: np.ndarray, grid: GridSpec) -> tuple[int, int]:
    """Minimal cell; ties go to the smaller ``mstop_l``, then the smaller ``mstop_ls``."""
    if not np.any(np.isfinite(surface)):
        raise ValueError("risk surface has no finite cell")
    s = np.where(np.isnan(surface), np.inf, surface)
    i, j = np.unravel_index(int(np.argmin(s)), s.shape)  # row-major: first hit is the tie winner
    return grid.mstop_l[i], grid.mstop_ls[j]


def _folds(ds: JointDataset, method: Method):
    if isinstance(method, Holdout):
        return [split_holdout(ds, method.fraction, method.seed)]
    if isinstance(method, KFold):
        return kfold_splits(ds, method.k, method.seed)
    if isinstance(method, EvalSet):
        if ds.p_long != method.data.p_long or ds.p_shared != method.data.p_shared:
            raise ValueError("evaluation set has different covariate arity from the training set")
        return [(ds, method.data)]
    raise TypeError(f"unknown tuning method {method!r}")


def _checkpoint_run(task):
    """One fit along one axis; returns ``{(a, b): risk}`` for the cells it covers."""
    train, evald, banks, cfg, axis, value, grid = task
    if axis == "ls":
        # mstop_ls fixed at value; checkpoints along mstop_l cover cells with a >= value
        cells = {a: (a, value) for a in grid.mstop_l if a >= value}
    else:
        cells = {b: (value, b) for b in grid.mstop_ls if b >= value}
    out = {}
    if not cells:
        return out
    last = max(cells)
    run_cfg = cfg.with_mstop(last, value) if axis == "ls" else cfg.with_mstop(value, last)

    def callback(m, state, nuisance):
        if m in cells:
            out[cells[m]] = risk_of(evald, train.ids, state, nuisance,
                                    components=marginal_components(train, state, nuisance))

    fit(train, banks, run_cfg, callback=callback, check_every=0)
    return out


def _surface_for_fold(train, evald, banks, cfg, grid, pool):
    tasks = [(train, evald, banks, cfg, "ls", b, grid) for b in grid.mstop_ls]
    tasks += [(train, evald, banks, cfg, "l", a, grid) for a in grid.mstop_l]
    results = pool.map(_checkpoint_run, tasks) if pool is not None else map(_checkpoint_run, tasks)
    if evald.status.sum() == 0:
        log.warning("evaluation part without events; its survival factor uses the fitted baseline hazard only")
    cells = {}
    for res in results:
        for key, risk in res.items():
            if key in cells and abs(cells[key] - risk) > 1e-9 * max(1.0, abs(risk)):
                raise RuntimeError(f"checkpoint mismatch at cell {key}: {cells[key]!r} vs {risk!r}")
            cells[key] = risk
    surface = np.empty(grid.shape)
    for i, a in enumerate(grid.mstop_l):
        for j, b in enumerate(grid.mstop_ls):
            surface[i, j] = cells[(a, b)]
    return surface


def evaluate_grid(ds: JointDataset, grid: GridSpec, method: Method,
                  banks: Optional[tuple[LearnerBank, LearnerBank]] = None,
                  cfg: Optional[BoostConfig] = None, jobs: int = 1) -> TuneResult:
    """Risk surface of a single grid (no refinement)."""
    cfg = cfg or BoostConfig()
    folds = _folds(ds, method)
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        fold_surfaces = [_surface_for_fold(tr, ev, banks, cfg, grid, pool) for tr, ev in folds]
    finally:
        if pool is not None:
            pool.shutdown()
    surface = np.mean(fold_surfaces, axis=0)
    return TuneResult(grid, surface, argmin_cell(surface, grid),
                      fold_surfaces if len(fold_surfaces) > 1 else [])


def tune_grid(ds: JointDataset, grid: GridSpec = DEFAULT_GRID, method: Method = Holdout(),
              banks: Optional[tuple[LearnerBank, LearnerBank]] = None,
              cfg: Optional[BoostConfig] = None, jobs: int = 1) -> TuneResult:
    """Search the grid, refining it ``grid.rounds`` times around the optimum.

    The returned result describes the last grid; earlier rounds are kept in
    ``history``.
    """
    history = []
    current = grid
    while True:
        res = evaluate_grid(ds, current, method, banks, cfg, jobs)
        if current.rounds == 0:
            res.history = history
            return res
        history.append(res)
        current = refine_grid(res, current)


def _spacing(axis: Sequence[int], value: int) -> int:
    if len(axis) == 1:
        return 0
    k = axis.index(value)
    gaps = [axis[k] - axis[k - 1]] if k > 0 else []
    gaps += [axis[k + 1] - axis[k]] if k + 1 < len(axis) else []
    return max(gaps)


def _refine_axis(axis: Sequence[int], value: int) -> tuple:
    h = _spacing(axis, value)
    if h <= 1:
        return tuple(axis)
    half = max(1, h // 2)
    below = h if value == axis[0] else 2 * h
    above = h if value == axis[-1] else 2 * h
    lo = max(1, value - below)
    values = [v for v in range(value - (value - lo) // half * half, value + above + 1, half) if v >= 1]
    return tuple(values)


def refine_grid(result: TuneResult, spec: GridSpec) -> GridSpec:
    """Grid around the optimum with halved spacing on each axis.

    Interior optima get two former spacings on either side. An optimum on
    a grid boundary gets one former spacing beyond that boundary. Values are
    clipped below at 1.
    """
    if spec.rounds <= 0:
        raise ValueError("no refinement rounds remaining")
    a, b = result.chosen
    return GridSpec(_refine_axis(spec.mstop_l, a), _refine_axis(spec.mstop_ls, b), spec.rounds - 1)
