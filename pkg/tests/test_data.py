import numpy as np
import pytest

from minimtl import data
from minimtl.tasks import regression


def test_zero_conflict_teachers_align():
    rng = np.random.default_rng(0)
    v = data.teacher_vectors(2, 8, 0.0, rng)
    assert abs(v[0] @ v[1] - 1.0) < 1e-6


@pytest.mark.parametrize("T, conflict", [(2, 0.5), (3, 0.25), (4, 0.1), (2, 1.0)])
def test_teacher_pairwise_cosine(T, conflict):
    v = data.teacher_vectors(T, 16, conflict, np.random.default_rng(1))
    cos = v @ v.T
    target = max(1 - 2 * conflict, -1 / (T - 1))
    np.testing.assert_allclose(cos[~np.eye(T, dtype=bool)], target, atol=1e-12)


def test_single_input_reproducible_and_shared():
    a = data.gen_single_input(3, 50, 6, seed=4)
    b = data.gen_single_input(3, 50, 6, seed=4)
    for da, db in zip(a, b):
        assert np.array_equal(da.inputs, db.inputs) and np.array_equal(da.targets, db.targets)
    assert a[0].inputs is a[1].inputs is a[2].inputs
    assert data.is_single_input(a)


def test_mlp_teacher_and_classification_variants():
    ds = data.gen_single_input(2, 40, 5, seed=1, teacher="mlp", num_classes=3)
    assert ds[0].task.is_classification
    assert set(np.unique(ds[0].targets)) <= {0.0, 1.0, 2.0}


def test_derived_seeds_distinct():
    seeds = data.derive_seeds(7, 5)
    assert len(set(seeds)) == 5


def test_multi_input_sizes_and_reproducibility():
    a = data.gen_multi_input(3, [10, 25, 7], 4, seed=2)
    b = data.gen_multi_input(3, [10, 25, 7], 4, seed=2)
    assert [len(d) for d in a] == [10, 25, 7]
    for da, db in zip(a, b):
        assert np.array_equal(da.inputs, db.inputs) and np.array_equal(da.targets, db.targets)
    assert not data.is_single_input(data.gen_multi_input(2, 10, 4, seed=2))


def test_single_input_batch_sizes():
    ds = data.gen_single_input(2, 10, 3, seed=0)
    sizes = [b.sizes[0] for b in data.batches(ds, 4, True, 0)]
    assert sizes == [4, 4, 2]


def test_multi_input_cycles_short_task():
    ds = data.gen_multi_input(2, [10, 4], 3, seed=0)
    steps = list(data.batches(ds, 4, False, 0))
    assert len(steps) == 3
    assert [b.sizes for b in steps] == [[4, 4], [4, 4], [2, 4]]
    # task 2 is exhausted after the first step and reshuffles for each later one
    seen = [set(map(tuple, b.inputs[1].data)) for b in steps]
    full = set(map(tuple, ds[1].inputs))
    assert all(s == full for s in seen)


def test_every_sample_once_per_epoch():
    ds = data.gen_multi_input(2, [13, 5], 3, seed=3)
    steps = list(data.batches(ds, 4, False, (3, 1)))
    rows = np.vstack([b.inputs[0].data for b in steps])
    assert len(rows) == 13
    assert set(map(tuple, rows)) == set(map(tuple, ds[0].inputs))


def test_same_epoch_seed_same_order():
    ds = data.gen_single_input(2, 30, 3, seed=0)
    a = [b.targets[0] for b in data.batches(ds, 7, True, (0, 5))]
    b = [b.targets[0] for b in data.batches(ds, 7, True, (0, 5))]
    c = [b.targets[0] for b in data.batches(ds, 7, True, (0, 6))]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_split_keeps_shared_inputs():
    ds = data.gen_single_input(2, 20, 3, seed=0)
    train, val = data.train_val_split(ds, 0.2)
    assert len(train[0]) == 16 and len(val[0]) == 4
    assert train[0].inputs is train[1].inputs and val[0].inputs is val[1].inputs


def test_csv_round_trip(tmp_path):
    ds = data.gen_single_input(2, 12, 3, seed=5) + data.gen_single_input(1, 12, 3, seed=6, num_classes=3)
    ds[2] = data.TaskDataset(ds[2].task.__class__("task2", "cross_entropy", "accuracy", 3, True),
                             ds[0].inputs, ds[2].targets)
    data.save_datasets(ds, tmp_path)
    back = data.load_datasets(tmp_path)
    assert [d.name for d in back] == ["task0", "task1", "task2"]
    for a, b in zip(ds, back):
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets.reshape(b.targets.shape), b.targets)
    assert back[2].task.is_classification
    assert data.is_single_input(back) and back[0].inputs is back[1].inputs


def test_bad_arguments():
    with pytest.raises(ValueError):
        data.teacher_vectors(2, 4, 1.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        list(data.batches(data.gen_single_input(1, 5, 2), 0, True, 0))
    with pytest.raises(ValueError):
        data.TaskDataset(regression("r"), np.ones((3, 2)), np.ones(2))
