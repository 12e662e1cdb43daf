import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from parseg.core import (
    DatasetError,
    OrganPartition,
    PartiallyLabeledDataset,
    load_dataset,
    restrict_labels,
    save_dataset,
)


def make_ds(n=2, subset=(1, 2), K=3, with_gt=False, seed=0):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, K + 1, size=(n, 4, 6)).astype(np.uint8)
    labels = np.stack([restrict_labels(g, subset) for g in gt])
    return PartiallyLabeledDataset(
        dataset_id="D1",
        organ_names=tuple(f"o{k}" for k in range(1, K + 1)),
        organ_subset=subset,
        sample_ids=[f"s{k}" for k in range(n)],
        images=rng.normal(size=(n, 4, 6)).astype(np.float32),
        labels=labels,
        split=["train"] * (n - 1) + ["val"],
        full_gt=gt if with_gt else None,
    )


def assert_same(a, b):
    assert a.dataset_id == b.dataset_id
    assert a.organ_names == b.organ_names and a.organ_subset == b.organ_subset
    assert a.sample_ids == b.sample_ids and a.split == b.split
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert (a.full_gt is None) == (b.full_gt is None)
    if a.full_gt is not None:
        assert a.full_gt.tobytes() == b.full_gt.tobytes()


def test_round_trip(tmp_path):
    ds = make_ds()
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert len(back) == 2
    assert_same(ds, back)


def test_gt_written_separately_and_flagged(tmp_path):
    ds = make_ds(with_gt=True)
    save_dataset(ds, tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["gt_eval_only"] is True
    assert sorted(p.name for p in (tmp_path / "d" / "gt").iterdir()) == ["s0.u8", "s1.u8"]
    assert_same(ds, load_dataset(tmp_path / "d"))


def test_label_outside_subset_rejected(tmp_path):
    ds = make_ds()
    save_dataset(ds, tmp_path / "d")
    bad = ds.labels[1].copy()
    bad[0, 0] = 3
    bad.tofile(tmp_path / "d" / "labels" / "s1.u8")
    with pytest.raises(DatasetError, match="label outside organ subset") as e:
        load_dataset(tmp_path / "d")
    assert e.value.sample == "s1"


def test_missing_sample_file(tmp_path):
    save_dataset(make_ds(), tmp_path / "d")
    (tmp_path / "d" / "images" / "s0.f32").unlink()
    with pytest.raises(DatasetError, match="missing sample file") as e:
        load_dataset(tmp_path / "d")
    assert e.value.sample == "s0"


def test_shape_mismatch(tmp_path):
    save_dataset(make_ds(), tmp_path / "d")
    np.zeros(5, dtype="<f4").tofile(tmp_path / "d" / "images" / "s1.f32")
    with pytest.raises(DatasetError, match="shape mismatch"):
        load_dataset(tmp_path / "d")


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError, match="at least one sample"):
        PartiallyLabeledDataset("D", ("a", "b"), (1,), [], np.zeros((0, 2, 2)), np.zeros((0, 2, 2)), [])


def test_gt_must_agree_with_labels():
    ds = make_ds(with_gt=True)
    gt = ds.full_gt.copy()
    gt[0][ds.labels[0] == 1] = 2
    if (ds.labels[0] == 1).any():
        with pytest.raises(DatasetError):
            PartiallyLabeledDataset(ds.dataset_id, ds.organ_names, ds.organ_subset, ds.sample_ids, ds.images, ds.labels, ds.split, gt)


def test_training_view_hides_gt():
    ds = make_ds(with_gt=True)
    assert ds.training_view().full_gt is None
    assert ds.full_gt is not None


def test_restrict_examples():
    v = np.array([[1, 2], [3, 0]])
    assert restrict_labels(v, {1, 2}).tolist() == [[1, 2], [0, 0]]
    assert restrict_labels(v, {1, 2, 3}).tolist() == v.tolist()
    assert restrict_labels(v, set()).tolist() == [[0, 0], [0, 0]]


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=st.integers(0, 5)),
       st.sets(st.integers(1, 5)))
def test_restrict_idempotent(values, subset):
    once = restrict_labels(values, subset)
    assert np.array_equal(restrict_labels(once, subset), once)
    assert set(np.unique(once).tolist()) <= subset | {0}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 4))
def test_round_trip_random(tmp_path_factory, seed, n):
    ds = make_ds(n=n + 1, with_gt=bool(seed % 2), seed=seed)
    path = tmp_path_factory.mktemp("rt")
    save_dataset(ds, path)
    assert_same(ds, load_dataset(path))


def test_partition_invariants_exhaustive():
    # every assignment of K organs to N labels that yields non-empty subsets is a valid partition
    for K in range(2, 6):
        for N in range(2, K + 1):
            for code in range(N**K):
                owner = [(code // N**k) % N for k in range(K)]
                subsets = [tuple(o + 1 for o in range(K) if owner[o] == i) for i in range(N)]
                if any(not s for s in subsets):
                    continue
                p = OrganPartition(tuple(f"o{k}" for k in range(K)), tuple(subsets))
                assert sum(len(s) for s in p.subsets) == K
                assert sorted(o for s in p.subsets for o in s) == list(range(1, K + 1))


def test_partition_rejects_bad():
    with pytest.raises(ValueError, match="overlap"):
        OrganPartition(("a", "b", "c"), ((1, 2), (2, 3)))
    with pytest.raises(ValueError, match="tile"):
        OrganPartition(("a", "b", "c"), ((1,), (2,)))
    with pytest.raises(ValueError, match="non-empty"):
        OrganPartition(("a", "b"), ((1, 2), ()))
    with pytest.raises(ValueError, match="at least 2"):
        OrganPartition(("a",), ((1,),))


def test_round_robin_partition():
    p = OrganPartition.round_robin(4, 2)
    assert p.subsets == ((1, 3), (2, 4))
    assert p.complement(0) == (2, 4)
    assert p.owner(4) == 1
