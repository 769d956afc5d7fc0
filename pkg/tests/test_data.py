import math

import numpy as np
import pytest

from distill_lab import data
from distill_lab import distillers as D
from distill_lab.data import Dataset
from distill_lab.errors import ParseError, SpecError
from distill_lab.nn import init_network
from distill_lab.trainer import TrainConfig


def _same(a: Dataset, b: Dataset):
    return a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()


@pytest.mark.parametrize("make", [
    lambda s: data.make_blobs(4, 30, 0.5, s),
    lambda s: data.make_spirals(3, 30, 0.2, 1.5, s),
])
def test_generators_are_deterministic(make):
    a, b, c = make(7), make(7), make(8)
    assert _same(a[0], b[0]) and _same(a[1], b[1])
    assert not _same(a[0], c[0])


@pytest.mark.parametrize("make", [data.make_blobs, data.make_spirals])
def test_class_histogram(make):
    args = (5, 37, 0.3) if make is data.make_blobs else (5, 37, 0.3, 1.0)
    for split in make(*args, seed=0):
        assert np.bincount(split.labels, minlength=5).tolist() == [37] * 5
        assert split.class_count == 5


def test_splits_are_disjoint_and_tagged():
    train, test = data.make_spirals(3, 200, 0.1, 1.75, seed=0)
    assert (train.split_tag, test.split_tag) == ("train", "test")
    rows = {r.tobytes() for r in train.features}
    assert not any(r.tobytes() in rows for r in test.features)
    assert len(train) + len(test) == 2 * 3 * 200


def test_blob_centers_on_radius_four():
    train, _ = data.make_blobs(6, 400, 1e-3, seed=1)
    for k in range(6):
        c = train.features[train.labels == k].mean(axis=0)
        assert math.hypot(*c) == pytest.approx(4.0, abs=1e-3)


def test_tiny_spread_blobs_are_linearly_separable():
    split = data.make_blobs(4, 50, 1e-3, seed=2)
    # a linear classifier: score each class by its projection onto its center direction
    angles = 2 * np.pi * np.arange(4) / 4
    w = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for ds in split:
        assert np.all(np.argmax(ds.features @ w.T, axis=1) == ds.labels)


@pytest.mark.parametrize("call", [
    lambda: data.make_blobs(1, 10, 1.0, 0),
    lambda: data.make_blobs(3, 0, 1.0, 0),
    lambda: data.make_blobs(3, 10, 0.0, 0),
    lambda: data.make_spirals(1, 10, 0.1, 1.0, 0),
    lambda: data.make_spirals(3, 10, -0.1, 1.0, 0),
    lambda: data.make_spirals(3, 10, 0.1, 0.0, 0),
])
def test_invalid_parameters(call):
    with pytest.raises(SpecError):
        call()


def test_dataset_invariants():
    with pytest.raises(SpecError):
        Dataset(np.zeros((2, 2)), [0, 3], 3)
    with pytest.raises(SpecError):
        Dataset(np.zeros((0, 2)), [], 3)
    with pytest.raises(SpecError):
        Dataset(np.zeros((2, 2)), [0], 3)


def test_standardize_uses_train_statistics_only():
    train, test = data.make_blobs(3, 100, 1.0, seed=0)
    test = Dataset(test.features * 5 + 3, test.labels, 3, "test")
    s_train, s_test = data.standardize(train, test)
    np.testing.assert_allclose(s_train.features.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(s_train.features.std(axis=0), 1, atol=1e-12)
    mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
    np.testing.assert_allclose(s_test.features, (test.features - mu) / sd, rtol=1e-14)


def test_canonical_task_shape():
    train, test = data.canonical_task(0)
    assert len(train) == len(test) == 1500 and train.dim == 2 and train.class_count == 3


def test_noise_free_spirals_have_a_capacity_gap():
    split = data.standardize(*data.make_spirals(3, 500, 0.0, 1.75, seed=0))
    wide = D.train_ce_only(init_network([2, 64, 64], 3, seed=1), split, TrainConfig(seed=1))
    narrow = D.train_ce_only(init_network([2, 4], 3, seed=1), split, TrainConfig(seed=1))
    assert wide.final_train_acc >= 0.99
    assert narrow.final_train_acc < wide.final_train_acc


def test_rotation_preserves_label_structure():
    train, test = data.make_spirals(3, 200, 0.2, 1.0, seed=3)
    angle = 0.7
    rtrain, rtest = data.rotate(train, angle), data.rotate(test, angle)
    np.testing.assert_allclose(np.linalg.norm(rtrain.features, axis=1), np.linalg.norm(train.features, axis=1))
    cfg = TrainConfig(epochs=60, milestones=(40,), seed=0)
    accs = []
    for split in ((train, test), (rtrain, rtest)):
        accs.append(D.train_ce_only(init_network([2, 32, 32], 3, seed=0), data.standardize(*split), cfg).final_test_acc)
    assert abs(accs[0] - accs[1]) < 0.05


# -- CSV ---------------------------------------------------------------------

def test_csv_round_trip_is_exact(tmp_path):
    train, _ = data.make_spirals(3, 50, 0.3, 1.75, seed=0)
    p = data.save_dataset(train, tmp_path / "sub" / "train.csv")
    back = data.load_dataset(p, class_count=3)
    assert _same(train, back)
    assert back.split_tag == "train"
    assert p.read_text().splitlines()[0] == "x0,x1,label"


def test_csv_split_tag_from_name(tmp_path):
    _, test = data.make_blobs(3, 5, 1.0, seed=0)
    assert data.load_dataset(data.save_dataset(test, tmp_path / "test.csv")).split_tag == "test"


def test_large_file_resaves_byte_identically(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(10_000, 3)) * 1e3, rng.integers(0, 4, size=10_000), 4)
    a = data.save_dataset(ds, tmp_path / "a.csv")
    b = data.save_dataset(data.load_dataset(a, class_count=4), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("x0,x1,label\n", 2),
    ("a,b,label\n1,2,0\n", 1),
    ("x0,x1,label\n1,2,0\n1,2\n", 3),
    ("x0,x1,label\n1,2,0\n1,oops,0\n", 3),
    ("x0,x1,label\n1,2,0\n1,2,0\n1,nan,1\n", 4),
    ("x0,x1,label\n1,2,zero\n", 2),
    ("x0,x1,label\n1,2,0\n1,2,-1\n", 3),
])
def test_malformed_csv_reports_line(text, line):
    with pytest.raises(ParseError) as exc:
        data.loads_dataset(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_label_beyond_class_count():
    with pytest.raises(ParseError) as exc:
        data.loads_dataset("x0,label\n0.5,1\n0.1,3\n", class_count=3)
    assert exc.value.line == 3
