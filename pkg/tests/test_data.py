import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boostjm.data import (
    DataError, JointDataset, LongObservation, ScalingManifest, SurvivalRecord, apply_scaling, kfold_splits,
    load_csv, save_csv, split_holdout, standardize,
)
from boostjm.simgen import generate, preset
from conftest import toy_dataset


def tiny():
    obs = [LongObservation(1, 0.0, 1.0, (0.5,)), LongObservation(1, 1.0, 2.0, (0.1,)),
           LongObservation(1, 2.0, 2.5, (-0.3,)), LongObservation(2, 0.0, 0.2, (1.2,)),
           LongObservation(2, 1.5, 0.4, (0.7,))]
    surv = [SurvivalRecord(1, 3.0, 1, (1.0,)), SurvivalRecord(2, 2.0, 0, (2.0,))]
    return JointDataset.from_records(obs, surv, names_long=("a",), names_shared=("b",))


def test_from_records_shape():
    ds = tiny()
    assert (ds.N, ds.n, ds.p_long, ds.p_shared) == (2, 5, 1, 1)
    assert ds.n_obs.tolist() == [3, 2]
    assert ds.last_row.tolist() == [2, 4]


def test_rows_are_sorted_and_grouped():
    rng = np.random.default_rng(1)
    ds = toy_dataset(rng, N=6)
    perm = rng.permutation(ds.n)
    shuffled = ds.replace(obs_ids=ds.obs_ids[perm], time=ds.time[perm], y=ds.y[perm], x_long=ds.x_long[perm])
    np.testing.assert_array_equal(shuffled.y, ds.y)
    assert np.all(np.diff(ds.group) >= 0)


@pytest.mark.parametrize("change, msg", [
    (dict(status=[1, 2]), "status"),
    (dict(event_time=[1.0, 2.0]), "precedes"),
    (dict(ids=[1, 3]), "unmatched"),
    (dict(time=[0.0, 1.0, 1.0, 0.0, 1.5]), "tie"),
    (dict(y=[1.0, np.nan, 2.5, 0.2, 0.4]), "non-finite"),
    (dict(time=[-1.0, 1.0, 2.0, 0.0, 1.5]), "nonnegative"),
])
def test_validation_errors(change, msg):
    with pytest.raises(DataError, match=msg):
        tiny().replace(**change)


def test_csv_round_trip(tmp_path):
    sim = generate(preset("S1", seed=3, N=40))
    ds = sim.dataset
    save_csv(ds, tmp_path / "l.csv", tmp_path / "s.csv")
    back = load_csv(tmp_path / "l.csv", tmp_path / "s.csv")
    for name in ("obs_ids", "time", "y", "x_long", "ids", "event_time", "status", "x_shared"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.names_long == ds.names_long
    save_csv(back, tmp_path / "l2.csv", tmp_path / "s2.csv")
    assert (tmp_path / "l.csv").read_bytes() == (tmp_path / "l2.csv").read_bytes()


def test_unmatched_individual_names_it(tmp_path):
    (tmp_path / "l.csv").write_text("id,time,y\n1,0,1\n7,0,2\n")
    (tmp_path / "s.csv").write_text("id,event_time,status\n1,1,0\n")
    with pytest.raises(DataError, match="unmatched individual 7"):
        load_csv(tmp_path / "l.csv", tmp_path / "s.csv")


def test_parse_errors_carry_location(tmp_path):
    (tmp_path / "l.csv").write_text("id,time,y\n1,0,1\n2,0,oops\n")
    (tmp_path / "s.csv").write_text("id,event_time,status\n1,1,0\n2,1,1\n")
    with pytest.raises(DataError) as err:
        load_csv(tmp_path / "l.csv", tmp_path / "s.csv")
    assert err.value.row == 3 and err.value.column == "y"
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "missing.csv", tmp_path / "s.csv")


def test_standardize_examples():
    obs = [LongObservation(i, 0.0, 0.0, ()) for i in (1, 2, 3)]
    surv = [SurvivalRecord(i, 1.0, 0, (float(i),)) for i in (1, 2, 3)]
    ds = JointDataset.from_records(obs, surv, names_shared=("x",))
    std, man = standardize(ds)
    np.testing.assert_allclose(std.x_shared[:, 0], [-1, 0, 1])
    assert man.columns["x"] == (2.0, 1.0)


def test_standardize_moments_and_idempotence():
    rng = np.random.default_rng(0)
    N = 1000
    ds = JointDataset(obs_ids=np.arange(N), time=np.zeros(N), y=np.zeros(N), x_long=rng.normal(5, 3, (N, 1)),
                      ids=np.arange(N), event_time=np.ones(N), status=np.zeros(N, int),
                      x_shared=rng.normal(5, 3, (N, 1)))
    std, _ = standardize(ds)
    for col in (std.x_long[:, 0], std.x_shared[:, 0]):
        assert abs(col.mean()) < 1e-12
        assert col.std(ddof=1) == pytest.approx(1.0, abs=1e-12)
    again, man2 = standardize(std)
    np.testing.assert_allclose(again.x_long, std.x_long, atol=1e-10)
    for m, s in man2.columns.values():
        assert abs(m) < 1e-10 and s == pytest.approx(1.0, abs=1e-10)


def test_constant_column_rejected():
    ds = tiny().replace(x_shared=[[1.0], [1.0]])
    with pytest.raises(DataError, match="zero-variance"):
        standardize(ds)


def test_manifest_json_and_apply():
    ds = toy_dataset(np.random.default_rng(4))
    std, man = standardize(ds)
    man2 = ScalingManifest.from_json(man.to_json())
    np.testing.assert_allclose(apply_scaling(ds, man2).x_long, std.x_long, rtol=1e-15)
    with pytest.raises(DataError):
        ScalingManifest({}).params(["nope"])


def test_holdout_split():
    ds = toy_dataset(np.random.default_rng(5), N=10)
    a, b = split_holdout(ds, 0.5, seed=3)
    assert a.N == b.N == 5
    assert not set(a.ids) & set(b.ids)
    a2, _ = split_holdout(ds, 0.5, seed=3)
    np.testing.assert_array_equal(a.ids, a2.ids)
    with pytest.raises(DataError):
        split_holdout(ds, 1.0, seed=0)


def test_holdout_rounding_on_s1():
    ds = generate(preset("S1", seed=0)).dataset
    train, test = split_holdout(ds, 2 / 3, seed=1)
    assert train.N == 333 and test.N == 167


@settings(max_examples=30, deadline=None)
@given(N=st.integers(4, 30), k=st.integers(2, 4), seed=st.integers(0, 1000))
def test_kfold_partitions_individuals(N, k, seed):
    ds = toy_dataset(np.random.default_rng(seed), N=N)
    folds = kfold_splits(ds, k, seed)
    held = np.concatenate([f[1].ids for f in folds])
    assert sorted(held.tolist()) == sorted(ds.ids.tolist())
    for train, test in folds:
        assert train.N + test.N == N
        # rows travel with their individual
        assert train.n + test.n == ds.n


def test_arrays_are_read_only():
    ds = tiny()
    with pytest.raises(ValueError):
        ds.y[0] = 5.0
