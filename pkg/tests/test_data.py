import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltmoe.data import (
    DataError,
    LabeledDataset,
    LongTailSpec,
    dataset_manifest,
    load_archive,
    make_longtail_counts,
    save_archive,
    split_divisions,
    subsample_longtail,
    synth_gaussian_lt,
)


def balanced_dataset(num_classes, per_class, dims=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = rng.standard_normal((labels.size, dims)).astype(np.float32)
    spec = LongTailSpec(np.full(num_classes, per_class))
    return LabeledDataset(inputs=inputs, labels=labels, spec=spec, split_tag="train")


# -- count profile -------------------------------------------------------------


def test_counts_cifar_style_endpoints():
    counts = make_longtail_counts(100, 500, 100)
    assert counts[0] == 500
    assert counts[-1] == 5
    assert np.all(np.diff(counts) <= 0)


def test_counts_balanced_when_if_one():
    counts = make_longtail_counts(10, 50, 1)
    assert np.all(counts == 50)


def test_counts_two_class_closed_form():
    assert make_longtail_counts(2, 10, 10).tolist() == [10, 1]


def test_counts_rejects_bad_args():
    with pytest.raises(DataError):
        make_longtail_counts(10, 100, 0.5)
    with pytest.raises(DataError):
        make_longtail_counts(10, 5, 10)  # n_max < IF


@given(st.integers(2, 200), st.integers(1, 1000), st.floats(1.0, 500.0))
@settings(max_examples=100, deadline=None)
def test_counts_profile_properties(c, n_max, imbalance):
    if n_max < imbalance:
        with pytest.raises(DataError):
            make_longtail_counts(c, n_max, imbalance)
        return
    counts = make_longtail_counts(c, n_max, imbalance)
    spec = LongTailSpec(counts)
    assert counts[0] == n_max
    assert abs(counts[-1] - n_max / imbalance) <= 1.0  # within one rounding unit
    assert np.all(np.diff(counts) <= 0)
    assert spec.total == counts.sum()


# -- divisions -------------------------------------------------------------------


def test_divisions_paper_thresholds():
    spec = LongTailSpec(np.array([150, 50, 10]))
    d = split_divisions(spec)
    assert d.many == {0}
    assert d.medium == {1}
    assert d.few == {2}


def test_divisions_all_many():
    d = split_divisions(LongTailSpec(np.full(7, 500)))
    assert d.many == set(range(7))
    assert not d.medium and not d.few


def test_divisions_boundaries_fall_in_medium():
    d = split_divisions(LongTailSpec(np.array([100, 20])))
    assert d.medium == {0, 1}


@given(st.lists(st.integers(1, 1000), min_size=1, max_size=50))
@settings(max_examples=100, deadline=None)
def test_divisions_partition(counts):
    spec = LongTailSpec(np.sort(counts)[::-1].copy())
    d = split_divisions(spec)
    union = d.many | d.medium | d.few
    assert union == set(range(spec.num_classes))
    assert len(d.many) + len(d.medium) + len(d.few) == spec.num_classes


# -- spec invariants ---------------------------------------------------------------


def test_spec_rejects_increasing_counts():
    with pytest.raises(DataError):
        LongTailSpec(np.array([1, 2, 3]))


def test_spec_rejects_empty_class():
    with pytest.raises(DataError):
        LongTailSpec(np.array([5, 0]))


def test_spec_imbalance_factor():
    assert LongTailSpec(np.array([100, 10, 2])).imbalance_factor == 50.0


# -- subsampling -------------------------------------------------------------------


def test_subsample_deterministic():
    src = balanced_dataset(5, 20)
    counts = make_longtail_counts(5, 20, 10)
    a = subsample_longtail(src, counts, seed=0)
    b = subsample_longtail(src, counts, seed=0)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    c = subsample_longtail(src, counts, seed=1)
    assert not np.array_equal(a.inputs, c.inputs)


def test_subsample_exact_counts():
    src = balanced_dataset(2, 10)
    out = subsample_longtail(src, [10, 1], seed=0)
    assert out.class_counts().tolist() == [10, 1]


def test_subsample_identity_is_permutation():
    src = balanced_dataset(3, 8)
    out = subsample_longtail(src, [8, 8, 8], seed=3)
    assert sorted(map(tuple, out.inputs.tolist())) == sorted(
        map(tuple, src.inputs.tolist())
    )


def test_subsample_insufficient_names_class():
    labels = np.array([0] * 10 + [1] * 4)
    src = LabeledDataset(
        inputs=np.zeros((14, 2), dtype=np.float32),
        labels=labels,
        spec=LongTailSpec(np.array([10, 4])),
        split_tag="train",
    )
    with pytest.raises(DataError, match="class 1"):
        subsample_longtail(src, [10, 5], seed=0)


# -- synthetic benchmark -------------------------------------------------------------


def class_mean_classifier(train, test):
    """Independent oracle: classify by nearest class mean."""
    c = train.spec.num_classes
    means = np.stack([
        train.inputs[train.labels == k].mean(axis=0) for k in range(c)
    ])
    dists = ((test.inputs[:, None, :] - means[None]) ** 2).sum(axis=-1)
    pred = dists.argmin(axis=-1)
    per_class = [
        (pred[test.labels == k] == k).mean() for k in range(c)
    ]
    return float(np.mean(per_class))


def test_synth_separable_reaches_oracle_accuracy():
    train, test = synth_gaussian_lt(2, 8, [100, 10], 10.0, seed=0)
    assert class_mean_classifier(train, test) > 0.95


def test_synth_zero_separation_is_chance():
    train, test = synth_gaussian_lt(4, 8, [200, 200, 200, 200], 0.0, seed=0,
                                    test_per_class=200)
    acc = class_mean_classifier(train, test)
    assert abs(acc - 0.25) < 0.1


def test_synth_deterministic():
    a_train, a_test = synth_gaussian_lt(3, 5, [30, 10, 3], 2.0, seed=42)
    b_train, b_test = synth_gaussian_lt(3, 5, [30, 10, 3], 2.0, seed=42)
    assert a_train.inputs.tobytes() == b_train.inputs.tobytes()
    assert a_test.inputs.tobytes() == b_test.inputs.tobytes()


def test_synth_counts_and_balance():
    train, test = synth_gaussian_lt(3, 5, [30, 10, 3], 2.0, seed=1, test_per_class=7)
    assert train.class_counts().tolist() == [30, 10, 3]
    assert test.class_counts().tolist() == [7, 7, 7]
    assert train.split_tag == "train" and test.split_tag == "test"


def test_synth_rejects_bad_args():
    with pytest.raises(DataError):
        synth_gaussian_lt(1, 5, [10], 1.0, seed=0)
    with pytest.raises(DataError):
        synth_gaussian_lt(3, 0, [3, 2, 1], 1.0, seed=0)


# -- datasets are immutable -----------------------------------------------------------


def test_dataset_arrays_readonly():
    train, _ = synth_gaussian_lt(2, 3, [5, 2], 1.0, seed=0)
    with pytest.raises(ValueError):
        train.inputs[0, 0] = 99.0


# -- manifest and archive -------------------------------------------------------------


def test_manifest_fields():
    train, _ = synth_gaussian_lt(3, 4, [150, 50, 10], 2.0, seed=5)
    m = dataset_manifest(train, seed=5)
    assert m["num_classes"] == 3
    assert m["counts"] == [150, 50, 10]
    assert m["imbalance_factor"] == 15.0
    assert m["seed"] == 5
    assert m["division_sizes"] == {"many": 1, "medium": 1, "few": 1}


def test_archive_roundtrip(tmp_path):
    train, _ = synth_gaussian_lt(3, 6, [20, 8, 2], 2.0, seed=9)
    path = tmp_path / "train.bin"
    save_archive(train, path, seed=9)
    loaded = load_archive(path)
    assert np.array_equal(loaded.inputs, train.inputs)
    assert np.array_equal(loaded.labels, train.labels)
    assert loaded.spec.counts.tolist() == train.spec.counts.tolist()
    assert loaded.split_tag == "train"


def test_archive_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not an archive at all")
    with pytest.raises(DataError):
        load_archive(path)
