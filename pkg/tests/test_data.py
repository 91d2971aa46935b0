import csv
import math

import numpy as np
import pytest

from mamba2mil import data as dt


def test_noise_free_full_rate_bags_are_pure_signal():
    spec = dt.SyntheticSpec(num_bags=10, classes=3, dim=5, n_min=2, n_max=6, rate=1.0, noise=0.0, seed=4)
    signals = dt.signal_vectors(spec)
    for bag in dt.generate_synthetic(spec):
        expect = signals[bag.label] if bag.label else np.zeros(5)
        assert np.array_equal(bag.features, np.tile(expect, (bag.size, 1)))


def test_signals_are_orthonormal():
    s = dt.signal_vectors(dt.SyntheticSpec(classes=7, dim=16))
    np.testing.assert_allclose(s @ s.T, np.eye(7), atol=1e-12)


def test_generation_is_deterministic():
    spec = dt.SyntheticSpec(num_bags=12, dim=6, seed=9)
    a, b = dt.generate_synthetic(spec), dt.generate_synthetic(spec)
    assert [(x.bag_id, x.label, x.features.tobytes()) for x in a] == \
        [(x.bag_id, x.label, x.features.tobytes()) for x in b]


def test_bag_contents_follow_spec():
    spec = dt.SyntheticSpec(num_bags=40, dim=16, rate=0.1, noise=0.01, seed=2)
    signals = dt.signal_vectors(spec)
    for bag in dt.generate_synthetic(spec):
        assert spec.n_min <= bag.size <= spec.n_max
        hits = int(np.sum(bag.features @ signals[1] > 0.5))
        assert hits == (math.ceil(spec.rate * bag.size) if bag.label else 0)


def test_oracle_accuracy_on_desk_task():
    spec = dt.SyntheticSpec(num_bags=200, dim=32, rate=0.05, noise=0.1, seed=0)
    assert dt.oracle_accuracy(dt.generate_synthetic(spec), spec) > 0.95


def test_class_counts_balanced_and_bracs():
    assert dt.class_counts(200, [1, 1]) == [100, 100]
    counts = dt.class_counts(537, dt.BRACS_PROPORTIONS)
    assert counts == list(dt.BRACS_PROPORTIONS)
    scaled = dt.class_counts(100, dt.BRACS_PROPORTIONS)
    assert sum(scaled) == 100
    assert all(abs(c - 100 * p / 537) < 1 for c, p in zip(scaled, dt.BRACS_PROPORTIONS))


def test_spec_validation():
    for bad in ({"rate": 0.0}, {"n_min": 0}, {"n_min": 5, "n_max": 4}, {"classes": 1}, {"class_weights": (1,)}):
        with pytest.raises(ValueError):
            dt.SyntheticSpec(**bad)


def write_fixture(tmp_path, rows=None):
    a = np.array([[0.1, -2.5, 3.0], [1e-300, 7.0, -0.0]])
    b = np.array([[np.pi, np.e, 1 / 3]])
    (tmp_path / "f").mkdir(exist_ok=True)
    dt.write_fbag(tmp_path / "f" / "a.fbag", a)
    dt.write_fbag(tmp_path / "f" / "b.fbag", b)
    m = tmp_path / "manifest.csv"
    rows = rows or [("a", "f/a.fbag", "0"), ("b", "f/b.fbag", "1")]
    m.write_text("bag_id,path,label\n" + "".join(",".join(r) + "\n" for r in rows))
    return m, a, b


def test_two_bag_fixture_loads_exactly(tmp_path):
    m, a, b = write_fixture(tmp_path)
    bags = dt.load_bags(m)
    assert [x.bag_id for x in bags] == ["a", "b"] and [x.label for x in bags] == [0, 1]
    assert bags[0].features.tobytes() == a.tobytes() and bags[1].features.tobytes() == b.tobytes()


def test_fbag_header_layout(tmp_path):
    dt.write_fbag(tmp_path / "x.fbag", np.ones((3, 2)))
    blob = (tmp_path / "x.fbag").read_bytes()
    assert blob[:4] == b"FBAG" and blob[4:6] == b"\x01\x00" and blob[6:8] == b"\x00\x00"
    assert blob[8:12] == (3).to_bytes(4, "little") and blob[12:16] == (2).to_bytes(4, "little")
    assert len(blob) == 16 + 3 * 2 * 8


def test_float32_ingestion(tmp_path):
    x = np.array([[0.5, -1.25], [3.0, 1e-3]], dtype=np.float32)
    dt.write_fbag(tmp_path / "x.fbag", x, float32=True)
    out = dt.read_fbag(tmp_path / "x.fbag")
    assert out.dtype == np.float64 and np.array_equal(out, x.astype(np.float64))


def test_truncated_file_is_size_error(tmp_path):
    m, _, _ = write_fixture(tmp_path)
    p = tmp_path / "f" / "b.fbag"
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(dt.SizeMismatchError, match="b.fbag"):
        dt.load_bags(m)


def test_magic_mismatch(tmp_path):
    m, _, _ = write_fixture(tmp_path)
    p = tmp_path / "f" / "a.fbag"
    p.write_bytes(b"XBAG" + p.read_bytes()[4:])
    with pytest.raises(dt.MagicMismatchError, match="a.fbag"):
        dt.load_bags(m)


def test_missing_file(tmp_path):
    m, _, _ = write_fixture(tmp_path, [("a", "f/a.fbag", "0"), ("z", "f/z.fbag", "1")])
    with pytest.raises(dt.MissingBagFileError, match="z.fbag"):
        dt.load_bags(m)


def test_bad_label(tmp_path):
    m, _, _ = write_fixture(tmp_path, [("a", "f/a.fbag", "zero")])
    with pytest.raises(dt.LabelError, match="a.fbag"):
        dt.load_bags(m)


def test_dimension_mismatch(tmp_path):
    m, _, _ = write_fixture(tmp_path, [("a", "f/a.fbag", "0"), ("c", "f/c.fbag", "1")])
    dt.write_fbag(tmp_path / "f" / "c.fbag", np.ones((2, 4)))
    with pytest.raises(dt.DimensionMismatchError, match="c.fbag"):
        dt.load_bags(m)


def test_error_kinds_are_distinct():
    kinds = {dt.MissingBagFileError, dt.MagicMismatchError, dt.SizeMismatchError, dt.LabelError,
             dt.DimensionMismatchError}
    assert len(kinds) == 5 and all(issubclass(k, dt.BagFormatError) for k in kinds)


def test_empty_manifest_warns(tmp_path):
    m = tmp_path / "manifest.csv"
    m.write_text("bag_id,path,label\n")
    with pytest.warns(UserWarning):
        assert dt.load_bags(m) == []


def test_save_load_save_is_byte_identical(tmp_path):
    bags = dt.generate_synthetic(dt.SyntheticSpec(num_bags=5, dim=3, n_min=1, n_max=4, seed=0))
    m1 = dt.save_bags(bags, tmp_path / "one")
    m2 = dt.save_bags(dt.load_bags(m1), tmp_path / "two")
    assert m1.read_bytes() == m2.read_bytes()
    for row in csv.DictReader(open(m1)):
        assert (tmp_path / "one" / row["path"]).read_bytes() == (tmp_path / "two" / row["path"]).read_bytes()


def labelled(counts):
    bags = []
    for label, n in enumerate(counts):
        bags += [dt.FeatureBag(f"c{label}_{i}", label, np.zeros((1, 1))) for i in range(n)]
    return bags


def test_splits_are_80_10_10():
    bags = labelled([50, 50])
    labels = {b.bag_id: b.label for b in bags}
    for plan in dt.make_splits(bags, folds=5, seed=0):
        assert (len(plan.train), len(plan.val), len(plan.test)) == (80, 10, 10)
        for part, per_class in ((plan.train, 40), (plan.val, 5), (plan.test, 5)):
            for c in (0, 1):
                assert abs(sum(labels[i] == c for i in part) - per_class) <= 1


@pytest.mark.parametrize("counts", [[50, 50], [40, 145, 70, 41, 48, 61, 132], [3, 9, 20]])
def test_splits_partition_and_stratify(counts):
    bags = labelled(counts)
    ids = {b.bag_id for b in bags}
    labels = {b.bag_id: b.label for b in bags}
    for plan in dt.make_splits(bags, folds=5, seed=3):
        parts = [set(plan.train), set(plan.val), set(plan.test)]
        assert set().union(*parts) == ids and sum(map(len, parts)) == len(ids)
        for c, n in enumerate(counts):
            for part, frac in zip(parts[1:], (0.1, 0.1)):
                assert abs(sum(labels[i] == c for i in part) - frac * n) <= 1


def test_splits_seeded():
    bags = labelled([20, 20])
    assert dt.make_splits(bags, seed=4) == dt.make_splits(bags, seed=4)
    plans = dt.make_splits(bags, seed=4)
    assert plans[0].test != plans[1].test and [p.seed for p in plans] == [4, 5, 6, 7, 8]


def test_stratification_errors():
    with pytest.raises(dt.StratificationError):
        dt.make_splits(labelled([5, 4]))
    with pytest.raises(dt.StratificationError):
        dt.make_splits(labelled([20, 2]))
