"""Joint longitudinal/survival dataset: validation, CSV I/O, scaling, splits.

The dataset is stored column-wise. Longitudinal rows are sorted by
``(id, time)`` and survival rows by ``id``; ``group`` maps every
longitudinal row to the position of its individual in the survival arrays.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LONG_KEYS = ("id", "time", "y")
SURV_KEYS = ("id", "event_time", "status")


class DataError(ValueError):
    """Validation or parse failure, optionally located by file, row and column."""

    def __init__(self, message, path=None, row=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.path = path
        self.row = row
        self.column = column


@dataclass(frozen=True)
class LongObservation:
    individual_id: int
    time: float
    response: float
    long_covariates: tuple[float, ...] = ()


@dataclass(frozen=True)
class SurvivalRecord:
    individual_id: int
    event_time: float
    event_indicator: int
    shared_covariates: tuple[float, ...] = ()


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class JointDataset:
    """Long-format longitudinal records plus one survival record per individual.

    Construction sorts both parts and validates them; the arrays are made
    read-only, so a dataset can be shared between workers.

    Parameters
    ----------
    obs_ids, time, y : array, shape (n,)
        Individual id, measurement time and response of every longitudinal row.
    x_long : array, shape (n, p_l)
        Longitudinal covariates (may vary over time).
    ids, event_time, status : array, shape (N,)
        Survival records. ``status`` is 1 for an observed event, 0 if censored.
    x_shared : array, shape (N, p_ls)
        Time-constant covariates entering the shared sub-predictor.
    """

    obs_ids: np.ndarray
    time: np.ndarray
    y: np.ndarray
    x_long: np.ndarray
    ids: np.ndarray
    event_time: np.ndarray
    status: np.ndarray
    x_shared: np.ndarray
    names_long: tuple[str, ...] = ()
    names_shared: tuple[str, ...] = ()
    group: np.ndarray = field(init=False, repr=False)
    n_obs: np.ndarray = field(init=False, repr=False)
    last_row: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        obs_ids = np.asarray(self.obs_ids)
        time = np.asarray(self.time, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        x_long = np.asarray(self.x_long, dtype=float)
        ids = np.asarray(self.ids)
        event_time = np.asarray(self.event_time, dtype=float).ravel()
        status = np.asarray(self.status)
        x_shared = np.asarray(self.x_shared, dtype=float)

        n, N = len(time), len(ids)
        if x_long.ndim == 1 and x_long.size == 0:
            x_long = x_long.reshape(n, 0)
        if x_shared.ndim == 1 and x_shared.size == 0:
            x_shared = x_shared.reshape(N, 0)
        if len(obs_ids) != n or len(y) != n or x_long.ndim != 2 or x_long.shape[0] != n:
            raise DataError("longitudinal arrays have inconsistent lengths")
        if len(event_time) != N or len(status) != N or x_shared.ndim != 2 or x_shared.shape[0] != N:
            raise DataError("survival arrays have inconsistent lengths")
        if N < 1:
            raise DataError("dataset has no individuals")
        if not np.all(np.equal(np.mod(obs_ids, 1), 0)) or not np.all(np.equal(np.mod(ids, 1), 0)):
            raise DataError("individual ids must be integers")
        obs_ids = obs_ids.astype(np.int64)
        ids = ids.astype(np.int64)

        names_long = tuple(self.names_long) or tuple(f"xl{k + 1}" for k in range(x_long.shape[1]))
        names_shared = tuple(self.names_shared) or tuple(f"xls{k + 1}" for k in range(x_shared.shape[1]))
        if len(names_long) != x_long.shape[1] or len(names_shared) != x_shared.shape[1]:
            raise DataError("covariate names do not match covariate arity")
        all_names = names_long + names_shared
        if len(set(all_names)) != len(all_names):
            raise DataError("covariate names must be unique across both parts")
        if set(all_names) & (set(LONG_KEYS) | set(SURV_KEYS)):
            raise DataError("covariate names clash with reserved columns")

        for label, arr in (("time", time), ("y", y), ("long covariates", x_long),
                           ("event_time", event_time), ("shared covariates", x_shared)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {label}")
        if np.any(time < 0):
            raise DataError("observation times must be nonnegative")
        if np.any(event_time <= 0):
            raise DataError("event times must be positive")
        if not np.all(np.isin(status, (0, 1))):
            raise DataError("status must be 0 or 1")
        status = status.astype(np.int64)

        s_order = np.argsort(ids, kind="stable")
        ids, event_time, status, x_shared = ids[s_order], event_time[s_order], status[s_order], x_shared[s_order]
        dup = ids[1:] == ids[:-1]
        if np.any(dup):
            raise DataError(f"duplicate individual {ids[1:][dup][0]}")

        o_order = np.lexsort((time, obs_ids))
        obs_ids, time, y, x_long = obs_ids[o_order], time[o_order], y[o_order], x_long[o_order]
        tie = (obs_ids[1:] == obs_ids[:-1]) & (time[1:] == time[:-1])
        if np.any(tie):
            raise DataError(f"time tie within individual {obs_ids[1:][tie][0]}")

        unmatched = np.setdiff1d(np.union1d(obs_ids, ids), np.intersect1d(obs_ids, ids))
        if unmatched.size:
            raise DataError(f"unmatched individual {unmatched[0]}")
        group = np.searchsorted(ids, obs_ids)
        n_obs = np.bincount(group, minlength=N)
        last_row = np.cumsum(n_obs) - 1
        if np.any(time[last_row] > event_time):
            bad = ids[np.argmax(time[last_row] > event_time)]
            raise DataError(f"event time precedes last observation of individual {bad}")

        for name, value in (
            ("obs_ids", _frozen(obs_ids, np.int64)), ("time", _frozen(time)), ("y", _frozen(y)),
            ("x_long", _frozen(x_long)), ("ids", _frozen(ids, np.int64)),
            ("event_time", _frozen(event_time)), ("status", _frozen(status, np.int64)),
            ("x_shared", _frozen(x_shared)), ("names_long", names_long),
            ("names_shared", names_shared), ("group", _frozen(group, np.int64)),
            ("n_obs", _frozen(n_obs, np.int64)), ("last_row", _frozen(last_row, np.int64)),
        ):
            object.__setattr__(self, name, value)

    @classmethod
    def from_records(cls, observations: Sequence[LongObservation], survival: Sequence[SurvivalRecord],
                     names_long=(), names_shared=()):
        p_l = len(observations[0].long_covariates) if observations else 0
        p_ls = len(survival[0].shared_covariates) if survival else 0
        if any(len(o.long_covariates) != p_l for o in observations):
            raise DataError("longitudinal covariate arity differs between records")
        if any(len(s.shared_covariates) != p_ls for s in survival):
            raise DataError("shared covariate arity differs between records")
        return cls(
            obs_ids=[o.individual_id for o in observations],
            time=[o.time for o in observations],
            y=[o.response for o in observations],
            x_long=np.array([o.long_covariates for o in observations], dtype=float).reshape(len(observations), p_l),
            ids=[s.individual_id for s in survival],
            event_time=[s.event_time for s in survival],
            status=[s.event_indicator for s in survival],
            x_shared=np.array([s.shared_covariates for s in survival], dtype=float).reshape(len(survival), p_ls),
            names_long=names_long,
            names_shared=names_shared,
        )

    @property
    def N(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.time)

    @property
    def p_long(self) -> int:
        return self.x_long.shape[1]

    @property
    def p_shared(self) -> int:
        return self.x_shared.shape[1]

    def replace(self, **changes) -> "JointDataset":
        fields = dict(
            obs_ids=self.obs_ids, time=self.time, y=self.y, x_long=self.x_long, ids=self.ids,
            event_time=self.event_time, status=self.status, x_shared=self.x_shared,
            names_long=self.names_long, names_shared=self.names_shared,
        )
        fields.update(changes)
        return JointDataset(**fields)

    def subset(self, positions) -> "JointDataset":
        """Dataset restricted to the individuals at the given survival positions."""
        positions = np.unique(np.asarray(positions, dtype=np.int64))
        rows = np.isin(self.group, positions)
        return self.replace(
            obs_ids=self.obs_ids[rows], time=self.time[rows], y=self.y[rows], x_long=self.x_long[rows],
            ids=self.ids[positions], event_time=self.event_time[positions],
            status=self.status[positions], x_shared=self.x_shared[positions],
        )

    def observations(self) -> list[LongObservation]:
        return [LongObservation(int(i), float(t), float(v), tuple(map(float, x)))
                for i, t, v, x in zip(self.obs_ids, self.time, self.y, self.x_long)]

    def survival_records(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(int(i), float(t), int(d), tuple(map(float, x)))
                for i, t, d, x in zip(self.ids, self.event_time, self.status, self.x_shared)]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _read_table(path, keys):
    path = Path(path)
    if not path.is_file():
        raise DataError("file not found", path=path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file", path=path) from None
        if tuple(header[:len(keys)]) != keys:
            raise DataError(f"header must start with {','.join(keys)}", path=path, row=1)
        names = header[len(keys):]
        if len(set(header)) != len(header):
            raise DataError("duplicate column names", path=path, row=1)
        ids, values = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", path=path, row=row_no)
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise DataError("id is not an integer", path=path, row=row_no, column="id") from None
            parsed = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"cannot parse {cell!r}", path=path, row=row_no, column=col) from None
                if not math.isfinite(v):
                    raise DataError("non-finite value", path=path, row=row_no, column=col)
                parsed.append(v)
            values.append(parsed)
    values = np.array(values, dtype=float).reshape(len(ids), len(header) - 1)
    return np.array(ids, dtype=np.int64), values, names


def load_csv(long_path, surv_path) -> JointDataset:
    """Read a longitudinal CSV (``id,time,y,...``) and a survival CSV
    (``id,event_time,status,...``) into a validated dataset."""
    obs_ids, long_vals, names_l = _read_table(long_path, LONG_KEYS)
    ids, surv_vals, names_ls = _read_table(surv_path, SURV_KEYS)

    seen = {}
    for k, i in enumerate(ids, start=2):
        if i in seen:
            raise DataError(f"duplicate individual {i}", path=surv_path, row=k, column="id")
        seen[i] = k
    status = surv_vals[:, 1]
    bad = np.flatnonzero(~np.isin(status, (0.0, 1.0)))
    if bad.size:
        raise DataError("status must be 0 or 1", path=surv_path, row=int(bad[0]) + 2, column="status")
    bad = np.flatnonzero(long_vals[:, 0] < 0)
    if bad.size:
        raise DataError("negative time", path=long_path, row=int(bad[0]) + 2, column="time")
    missing = sorted(set(obs_ids.tolist()) - seen.keys())
    if missing:
        row = int(np.flatnonzero(obs_ids == missing[0])[0]) + 2
        raise DataError(f"unmatched individual {missing[0]}", path=long_path, row=row, column="id")
    orphan = sorted(seen.keys() - set(obs_ids.tolist()))
    if orphan:
        raise DataError(f"unmatched individual {orphan[0]}", path=surv_path, row=seen[orphan[0]], column="id")
    order = {}
    for k, (i, t) in enumerate(zip(obs_ids, long_vals[:, 0]), start=2):
        if (i, t) in order:
            raise DataError(f"time tie within individual {i}", path=long_path, row=k, column="time")
        order[(i, t)] = k
    if len(ids) < 2:
        raise DataError("at least two individuals are required", path=surv_path)

    return JointDataset(
        obs_ids=obs_ids, time=long_vals[:, 0], y=long_vals[:, 1], x_long=long_vals[:, 2:],
        ids=ids, event_time=surv_vals[:, 0], status=surv_vals[:, 1].astype(np.int64),
        x_shared=surv_vals[:, 2:], names_long=tuple(names_l), names_shared=tuple(names_ls),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(ds: JointDataset, long_path, surv_path) -> None:
    """Write both CSV files; floats use the shortest round-trip representation."""
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LONG_KEYS) + list(ds.names_long))
        for k in range(ds.n):
            w.writerow([int(ds.obs_ids[k]), _fmt(ds.time[k]), _fmt(ds.y[k])] + [_fmt(v) for v in ds.x_long[k]])
    with open(surv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(SURV_KEYS) + list(ds.names_shared))
        for k in range(ds.N):
            w.writerow([int(ds.ids[k]), _fmt(ds.event_time[k]), int(ds.status[k])]
                       + [_fmt(v) for v in ds.x_shared[k]])


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingManifest:
    """Per-column ``(mean, sd)`` used to standardize covariates."""

    columns: dict[str, tuple[float, float]]

    def to_json(self) -> str:
        return json.dumps({k: {"mean": m, "sd": s} for k, (m, s) in self.columns.items()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalingManifest":
        raw = json.loads(text)
        return cls({k: (float(v["mean"]), float(v["sd"])) for k, v in raw.items()})

    @classmethod
    def identity(cls, ds: JointDataset) -> "ScalingManifest":
        return cls({k: (0.0, 1.0) for k in ds.names_long + ds.names_shared})

    def params(self, names) -> tuple[np.ndarray, np.ndarray]:
        missing = [k for k in names if k not in self.columns]
        if missing:
            raise DataError(f"no scaling entry for column {missing[0]!r}")
        mean = np.array([self.columns[k][0] for k in names], dtype=float)
        sd = np.array([self.columns[k][1] for k in names], dtype=float)
        return mean, sd


def _column_moments(x, names):
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    sd = x.std(axis=0, ddof=1) if len(x) > 1 else np.zeros(x.shape[1])
    for k, name in enumerate(names):
        if not sd[k] > 0:
            raise DataError(f"zero-variance column {name!r}", column=name)
    return mean, sd


def standardize(ds: JointDataset) -> tuple[JointDataset, ScalingManifest]:
    """Center each covariate to mean 0 and scale to sample sd 1.

    Longitudinal covariates use moments over observations, shared covariates
    over individuals. Constant columns raise :class:`DataError`.
    """
    ml, sl = _column_moments(ds.x_long, ds.names_long)
    ms, ss = _column_moments(ds.x_shared, ds.names_shared)
    cols = {k: (float(m), float(s)) for k, m, s in zip(ds.names_long, ml, sl)}
    cols.update({k: (float(m), float(s)) for k, m, s in zip(ds.names_shared, ms, ss)})
    manifest = ScalingManifest(cols)
    return apply_scaling(ds, manifest), manifest


def apply_scaling(ds: JointDataset, manifest: ScalingManifest) -> JointDataset:
    """Standardize ``ds`` with moments taken from another (training) dataset."""
    ml, sl = manifest.params(ds.names_long)
    ms, ss = manifest.params(ds.names_shared)
    return ds.replace(x_long=(ds.x_long - ml) / sl, x_shared=(ds.x_shared - ms) / ss)


# ---------------------------------------------------------------------------
# Splits (always by individual)
# ---------------------------------------------------------------------------


def split_holdout(ds: JointDataset, fraction: float, seed: int) -> tuple[JointDataset, JointDataset]:
    """Random individual-level split; ``floor(fraction * N)`` individuals train."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n_train = int(math.floor(fraction * ds.N))
    if n_train < 1 or n_train >= ds.N:
        raise DataError(f"fraction {fraction} leaves an empty part for N={ds.N}")
    perm = np.random.default_rng(seed).permutation(ds.N)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def kfold_splits(ds: JointDataset, k: int, seed: int) -> list[tuple[JointDataset, JointDataset]]:
    """``k`` (train, held-out) pairs whose held-out parts partition the individuals."""
    if k < 2 or k > ds.N:
        raise DataError(f"k must lie in [2, N={ds.N}], got {k}")
    perm = np.random.default_rng(seed).permutation(ds.N)
    folds = np.array_split(perm, k)
    return [(ds.subset(np.setdiff1d(perm, f)), ds.subset(f)) for f in folds]
