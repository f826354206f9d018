import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpeft.data import (
    Dataset,
    Partition,
    check_partition,
    label_entropy,
    load_csv,
    partition_dirichlet,
    partition_iid,
    partition_pathological,
    save_csv,
    split_train_test,
    synth_generate,
)
from fedpeft.errors import ConfigError, DataError, PartitionError


def test_synth_balanced_and_seeded():
    a = synth_generate(5, 3, 103, seed=2)
    b = synth_generate(5, 3, 103, seed=2)
    counts = a.class_counts()
    assert counts.max() - counts.min() <= 1 and counts.sum() == 103
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != synth_generate(5, 3, 103, seed=3).fingerprint()


def test_synth_validation():
    with pytest.raises(ConfigError):
        synth_generate(10, 3, 5)


def test_csv_roundtrip(tmp_path):
    ds = synth_generate(3, 4, 30, seed=1)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    assert path.read_text().splitlines()[0] == "f0,f1,f2,f3,label"
    back = load_csv(path, 3)
    assert back.fingerprint() == ds.fingerprint()


def test_csv_bad_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1,2,0\n")
    with pytest.raises(DataError):
        load_csv(path)


def test_csv_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_csv(tmp_path / "nope.csv")


def test_dataset_label_check():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 3)


@given(st.floats(0.1, 0.9), st.integers(0, 1000))
def test_split_is_stratified_and_exact(frac, seed):
    ds = synth_generate(4, 2, 40, seed=seed % 7)
    tr, te = split_train_test(ds, frac, seed)
    assert len(tr) == int(np.floor(frac * 40 + 0.5))
    assert len(tr) + len(te) == 40
    assert (tr.class_counts() > 0).all() and (te.class_counts() > 0).all()


def test_split_too_small_for_every_class():
    ds = synth_generate(4, 2, 40, seed=0)
    with pytest.raises(ConfigError):
        split_train_test(ds, 0.05, 0)


def test_split_rejects_singleton_class():
    ds = Dataset(np.zeros((3, 1)), np.array([0, 0, 1]), 2)
    with pytest.raises(DataError):
        split_train_test(ds, 0.5, 0)


def covers(p, n):
    allidx = np.sort(np.concatenate(p.clients))
    return np.array_equal(allidx, np.arange(n))


@given(st.integers(1, 30), st.floats(0.01, 100.0), st.integers(0, 10_000))
def test_dirichlet_partition_is_exact_cover(n_clients, alpha, seed):
    ds = synth_generate(5, 2, 120, seed=1)
    p = partition_dirichlet(ds, n_clients, alpha, seed)
    check_partition(p, len(ds))
    assert p.n_clients == n_clients and covers(p, len(ds))


# shards no larger than a class, so each shard spans at most two labels
@given(st.integers(10, 20), st.integers(1, 3), st.integers(0, 10_000))
def test_pathological_partition(n_clients, shards, seed):
    ds = synth_generate(10, 2, 200, seed=1)
    p = partition_pathological(ds, n_clients, shards, seed)
    check_partition(p, len(ds))
    assert covers(p, len(ds))
    hist = p.label_histograms(ds.labels, 10)
    assert ((hist > 0).sum(axis=1) <= 2 * shards).all()


def test_pathological_class_aligned_shards():
    ds = synth_generate(20, 2, 2000, seed=0)
    p = partition_pathological(ds, 20, 2, seed=0)
    hist = p.label_histograms(ds.labels, 20)
    assert ((hist > 0).sum(axis=1) <= 2).all()


def test_iid_partition_sizes():
    ds = synth_generate(4, 2, 103, seed=0)
    p = partition_iid(ds, 10, 0)
    assert sorted(p.sizes()) == [10] * 7 + [11] * 3 and covers(p, 103)


def test_heterogeneity_ordering():
    ds = synth_generate(20, 2, 6000, seed=0)
    ent = [label_entropy(partition_dirichlet(ds, 50, a, 0), ds.labels, 20).mean() for a in (1000.0, 1.0, 0.1)]
    path = label_entropy(partition_pathological(ds, 50, 2, 0), ds.labels, 20).mean()
    assert ent[0] > ent[1] > ent[2] > path


def test_partition_json_roundtrip():
    ds = synth_generate(4, 2, 50, seed=0)
    p = partition_dirichlet(ds, 5, 0.5, 3)
    q = Partition.from_json(p.to_json())
    assert q.scheme == p.scheme and all(np.array_equal(a, b) for a, b in zip(p.clients, q.clients))


def test_check_partition_catches_overlap():
    with pytest.raises(PartitionError):
        check_partition(Partition((np.array([0, 1]), np.array([1, 2]))), 3)
    with pytest.raises(PartitionError):
        check_partition(Partition((np.array([0]), np.array([], dtype=int))), 3)


def test_too_many_clients():
    ds = synth_generate(2, 2, 4, seed=0)
    with pytest.raises(ConfigError):
        partition_dirichlet(ds, 5, 1.0, 0)
