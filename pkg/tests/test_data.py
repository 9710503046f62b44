"""Dataset ingestion, normalization, splitting, generators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triguard.data import (ClassTooSmallError, Dataset, ParseError, SplitSpec,
                           apply_normalization, denormalize, gen_blobs,
                           gen_xor, load_csv, minmax_normalize,
                           normalize_vector, stratified_split,
                           stratified_split_indices)


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- load_csv ----------------------------------------------------------------

def test_load_csv_dense_first_appearance(tmp_path):
    path = write(tmp_path, "a,b,y\n0,0,neg\n1,1,pos\n2,0,neg\n")
    ds = load_csv(path, label_column="y")
    assert ds.n_samples == 3 and ds.feature_dim == 2 and ds.class_count == 2
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.label_names == ["neg", "pos"]
    np.testing.assert_array_equal(ds.samples, [[0, 0], [1, 1], [2, 0]])


def test_load_csv_label_by_index_no_header(tmp_path):
    path = write(tmp_path, "1.5,0,a\n2.5,1,b\n3.5,0,a\n")
    ds = load_csv(path, label_column=2, has_header=False)
    assert ds.feature_dim == 2
    assert ds.labels.tolist() == [0, 1, 0]
    # negative index counts from the end
    ds2 = load_csv(path, label_column=-1, has_header=False)
    assert ds2.labels.tolist() == ds.labels.tolist()


def test_load_csv_rejects_inf_naming_row(tmp_path):
    rows = ["a,b,y"] + [f"{i},1,x{i % 2}" for i in range(1, 10)]
    rows[6] = "1,inf,x0"  # file line 7
    path = write(tmp_path, "\n".join(rows) + "\n")
    with pytest.raises(ParseError, match="row 7") as exc:
        load_csv(path, label_column="y")
    assert exc.value.row == 7 and exc.value.column == "b"


def test_load_csv_parse_error_location(tmp_path):
    path = write(tmp_path, "a,b,y\n0,oops,neg\n1,1,pos\n")
    with pytest.raises(ParseError, match="row 2.*column b"):
        load_csv(path, label_column="y")


def test_load_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", label_column=0)
    single = write(tmp_path, "a,y\n1,same\n2,same\n", "single.csv")
    with pytest.raises(ValueError, match="single class"):
        load_csv(single, label_column="y")
    path = write(tmp_path, "1,0\n2,1\n", "nohdr.csv")
    with pytest.raises(ValueError, match="has_header"):
        load_csv(path, label_column="y", has_header=False)
    with pytest.raises(ValueError, match="not found"):
        load_csv(write(tmp_path, "a,y\n1,0\n2,1\n", "h.csv"), label_column="z")


def test_load_csv_banknote_shape(banknote_csv):
    ds = load_csv(banknote_csv, label_column="class")
    assert ds.n_samples == 1372
    assert ds.feature_dim == 4
    assert ds.class_count == 2


# -- dataset invariants --------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(ValueError, match="NaN"):
        Dataset(samples=np.array([[np.nan]]), labels=np.array([0]), class_count=2)
    with pytest.raises(ValueError, match="labels"):
        Dataset(samples=np.ones((2, 1)), labels=np.array([0, 5]), class_count=2)
    ds = Dataset(samples=np.ones((2, 1)), labels=np.array([0, 1]), class_count=2)
    with pytest.raises(ValueError):
        ds.samples[0, 0] = 5.0  # read-only after construction


# -- normalization -------------------------------------------------------------

def test_minmax_normalize_basic():
    ds = Dataset(samples=np.array([[2.0], [4.0], [6.0]]),
                 labels=np.array([0, 1, 0]), class_count=2)
    out = minmax_normalize(ds)
    assert out.samples[:, 0].tolist() == [0.0, 0.5, 1.0]
    assert out.norm[0].tolist() == [2.0, 6.0]


def test_constant_feature_maps_to_zero():
    ds = Dataset(samples=np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]),
                 labels=np.array([0, 1, 0]), class_count=2)
    out = minmax_normalize(ds)
    assert np.all(out.samples[:, 0] == 0.0)


def test_out_of_range_values_not_clipped():
    norm = np.array([[2.0, 6.0]])
    assert normalize_vector(np.array([8.0]), norm)[0] == 1.5
    ds = Dataset(samples=np.array([[8.0], [1.0], [3.0]]),
                 labels=np.array([0, 1, 0]), class_count=2)
    out = apply_normalization(ds, norm)
    assert out.samples[0, 0] == 1.5
    assert out.samples[1, 0] == -0.25


def test_normalize_twice_rejected():
    ds = minmax_normalize(gen_blobs(5, [(0, 0), (3, 3)], 0.5, seed=0))
    with pytest.raises(ValueError, match="already normalized"):
        minmax_normalize(ds)
    with pytest.raises(ValueError, match="already normalized"):
        apply_normalization(ds, ds.norm)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    samples = rng.normal(0, 10, size=(rng.integers(2, 30), rng.integers(1, 5)))
    labels = np.zeros(len(samples), dtype=np.int64)
    labels[0] = 1
    ds = Dataset(samples=samples, labels=labels, class_count=2)
    back = denormalize(minmax_normalize(ds))
    np.testing.assert_allclose(back.samples, ds.samples, rtol=1e-12, atol=1e-12)
    assert back.norm is None


# -- stratified split ----------------------------------------------------------

def exact_blobs():
    return gen_blobs(100, [(0, 0), (5, 5), (9, 0)], 1.0, seed=1)


def test_split_exact_proportions():
    ds = exact_blobs()
    train, val, test = stratified_split(ds, SplitSpec(0.6, 0.2, seed=0))
    for c in range(3):
        assert np.sum(train.labels == c) == 60
        assert np.sum(val.labels == c) == 20
        assert np.sum(test.labels == c) == 20


def test_split_deterministic_and_partitions():
    ds = exact_blobs()
    spec = SplitSpec(0.5, 0.25, seed=9)
    a = stratified_split_indices(ds.labels, ds.class_count, spec)
    b = stratified_split_indices(ds.labels, ds.class_count, spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    merged = np.concatenate(a)
    assert len(merged) == ds.n_samples
    assert len(np.unique(merged)) == ds.n_samples  # disjoint and exhaustive


def test_split_class_too_small():
    ds = Dataset(samples=np.arange(6, dtype=float).reshape(6, 1),
                 labels=np.array([0, 0, 0, 0, 1, 1]), class_count=2)
    with pytest.raises(ClassTooSmallError, match="class 1"):
        stratified_split(ds, SplitSpec(0.5, 0.25, seed=0))


def test_split_three_samples_per_class_keeps_one_each():
    ds = Dataset(samples=np.arange(6, dtype=float).reshape(6, 1),
                 labels=np.array([0, 0, 0, 1, 1, 1]), class_count=2)
    train, val, test = stratified_split(ds, SplitSpec(0.8, 0.1, seed=0))
    for part in (train, val, test):
        assert np.sum(part.labels == 0) >= 1
        assert np.sum(part.labels == 1) >= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(10, 60),
       st.floats(0.2, 0.7), st.floats(0.1, 0.25))
def test_split_proportions_within_one_sample(seed, n_per_class, f_tr, f_va):
    if f_tr + f_va >= 0.95:
        f_va = 0.9 - f_tr
    ds = gen_blobs(n_per_class, [(0, 0), (8, 8)], 1.0, seed=seed % 100)
    train, val, _ = stratified_split(ds, SplitSpec(f_tr, f_va, seed=seed))
    for c in range(2):
        assert abs(np.sum(train.labels == c) - f_tr * n_per_class) <= 1
        assert abs(np.sum(val.labels == c) - f_va * n_per_class) <= 1


# -- generators ----------------------------------------------------------------

def test_gen_xor_zero_noise():
    ds = gen_xor(1, noise_sd=0.0, seed=0)
    assert ds.n_samples == 4 and ds.class_count == 2
    rows = {tuple(p): l for p, l in zip(ds.samples.tolist(), ds.labels.tolist())}
    assert rows[(1.0, 1.0)] == rows[(-1.0, -1.0)] == 0
    assert rows[(1.0, -1.0)] == rows[(-1.0, 1.0)] == 1


def test_gen_xor_linearly_inseparable():
    # no line w.x+b separates zero-noise XOR points
    ds = gen_xor(1, 0.0, seed=0)
    X, y = ds.samples, ds.labels
    rng = np.random.default_rng(0)
    for _ in range(200):
        w, b = rng.normal(size=2), rng.normal()
        side = (X @ w + b) > 0
        assert not (np.all(side == (y == 1)) or np.all(side == (y == 0)))


def test_generators_deterministic_and_validated():
    a = gen_xor(50, 0.3, seed=5)
    b = gen_xor(50, 0.3, seed=5)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = gen_blobs(20, [(0, 0, 0), (1, 1, 1)], 0.2, seed=3)
    d = gen_blobs(20, [(0, 0, 0), (1, 1, 1)], 0.2, seed=3)
    np.testing.assert_array_equal(c.samples, d.samples)
    assert c.feature_dim == 3
    with pytest.raises(ValueError):
        gen_blobs(0, [(0, 0), (1, 1)], 0.2, seed=0)
    with pytest.raises(ValueError):
        gen_blobs(5, [(0, 0)], 0.2, seed=0)
    with pytest.raises(ValueError):
        gen_blobs(5, [(0, 0), (1, 1)], 0.0, seed=0)
    with pytest.raises(ValueError):
        gen_xor(0, 0.1, seed=0)
