import numpy as np
import pytest

from aealt.data import (
    EmbeddingMatrix,
    FormatError,
    LabeledDataset,
    SyntheticSpec,
    decode_emb1,
    encode_emb1,
    fit_scaler,
    generate_synthetic,
    join_labels,
    load_embeddings,
    load_labels,
    save_dataset,
    save_embeddings,
    split_dataset,
    split_indices,
)
from aealt.downstream import fit_logistic, predict
from aealt.factors import fit_pca

from oracles import principal_angles


# -- containers ----------------------------------------------------------------


def test_embedding_matrix_validation():
    with pytest.raises(ValueError):
        EmbeddingMatrix(("a", "a"), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EmbeddingMatrix(("a",), np.array([[np.nan]]))
    with pytest.raises(ValueError):
        EmbeddingMatrix(("a", "b"), np.zeros((3, 2)))


def test_embedding_values_are_read_only():
    emb = EmbeddingMatrix.from_array(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        emb.values[0, 0] = 1.0


def test_labeled_dataset_rejects_out_of_range_labels():
    emb = EmbeddingMatrix.from_array(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        LabeledDataset(emb, np.array([0, 1, 2]), "classification", 2)
    with pytest.raises(ValueError):
        LabeledDataset(emb, np.array([0.5, 1, 0]), "classification")


# -- file formats ----------------------------------------------------------------


def test_csv_parse(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("id,e0,e1\na,1.0,2.0\nb,3.0,4.0")
    emb = load_embeddings(p)
    assert emb.ids == ("a", "b")
    np.testing.assert_array_equal(emb.values, [[1, 2], [3, 4]])


def test_csv_ragged_row_names_the_line(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("id,e0,e1\na,1.0,2.0\nb,3.0,4.0,5.0\n")
    with pytest.raises(FormatError, match="line 3"):
        load_embeddings(p)


def test_csv_missing_header(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(FormatError):
        load_embeddings(p)


def test_binary_round_trip_is_bit_identical(tmp_path, rng):
    emb = EmbeddingMatrix(("x", "y", "zé"), rng.normal(size=(3, 5)) * 1e300)
    save_embeddings(emb, tmp_path / "e.bin")
    back = load_embeddings(tmp_path / "e.bin")
    assert back.ids == emb.ids
    assert back.values.tobytes() == emb.values.tobytes()


def test_binary_bad_magic():
    payload = bytearray(encode_emb1(np.zeros((1, 1)), ["a"]))
    payload[0:4] = b"XXXX"
    with pytest.raises(FormatError):
        decode_emb1(bytes(payload))


def test_binary_truncated():
    payload = encode_emb1(np.zeros((2, 3)), ["a", "b"])
    with pytest.raises(FormatError):
        decode_emb1(payload[:-3])


def test_csv_binary_csv_round_trip_preserves_17_digits(tmp_path, rng):
    vals = rng.normal(size=(4, 3)) * np.array([1e-12, 1.0, 1e12])
    emb = EmbeddingMatrix.from_array(vals)
    save_embeddings(emb, tmp_path / "a.csv")
    save_embeddings(load_embeddings(tmp_path / "a.csv"), tmp_path / "b.bin")
    save_embeddings(load_embeddings(tmp_path / "b.bin"), tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "c.csv").read_text()
    np.testing.assert_array_equal(load_embeddings(tmp_path / "c.csv").values, vals)


def test_labels_join_by_id(tmp_path):
    emb = EmbeddingMatrix(("b", "a"), np.eye(2))
    (tmp_path / "l.csv").write_text("id,target\na,0\nb,1\n")
    ds = join_labels(emb, load_labels(tmp_path / "l.csv"), "classification")
    assert ds.targets.tolist() == [1, 0]


def test_labels_missing_or_extra_ids_are_errors(tmp_path):
    emb = EmbeddingMatrix(("a", "b"), np.eye(2))
    with pytest.raises(FormatError, match="no label"):
        join_labels(emb, {"a": "0"}, "classification")
    with pytest.raises(FormatError, match="no embedding"):
        join_labels(emb, {"a": "0", "b": "1", "c": "1"}, "classification")


def test_save_dataset_round_trip(tmp_path):
    ds, _, _ = generate_synthetic(SyntheticSpec(n=20, d=4, r=2, task="regression", seed=3))
    paths = save_dataset(ds, tmp_path)
    back = join_labels(load_embeddings(paths["embeddings"]), load_labels(paths["labels"]), "regression")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.targets, ds.targets)


# -- splits ----------------------------------------------------------------------


def test_split_sizes():
    tr, te = split_indices(None, 10, 0.7, seed=0, stratified=False)
    assert (len(tr), len(te)) == (7, 3)


def test_stratified_split_per_class_counts():
    y = np.array([0] * 90 + [1] * 10)
    tr, _ = split_indices(y, 100, 0.7, seed=5, stratified=True)
    assert np.bincount(y[tr]).tolist() == [63, 7]


@pytest.mark.parametrize("stratified", [False, True])
def test_split_is_an_exact_partition(stratified):
    y = np.random.default_rng(1).integers(0, 3, size=57)
    tr, te = split_indices(y, 57, 0.7, seed=9, stratified=stratified)
    assert len(np.intersect1d(tr, te)) == 0
    assert sorted(np.r_[tr, te].tolist()) == list(range(57))
    assert len(tr) == 40  # round(0.7 * 57) = round(39.9)


def test_stratified_proportions_within_one_sample():
    y = np.array([0] * 13 + [1] * 29 + [2] * 8)
    tr, _ = split_indices(y, y.size, 0.7, seed=2, stratified=True)
    want = 0.7 * np.bincount(y)
    assert np.all(np.abs(np.bincount(y[tr]) - want) <= 1)


def test_split_is_deterministic():
    a = split_indices(None, 30, 0.7, seed=4, stratified=False)
    b = split_indices(None, 30, 0.7, seed=4, stratified=False)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_stratified_singleton_class_is_an_error():
    with pytest.raises(ValueError):
        split_indices(np.array([0, 0, 0, 1]), 4, 0.7, seed=0, stratified=True)


def test_split_dataset_keeps_rows_aligned():
    ds, _, _ = generate_synthetic(SyntheticSpec(n=30, d=4, r=2, seed=1))
    tr, te = split_dataset(ds, seed=3, stratified=True)
    lookup = {i: (row, t) for i, row, t in zip(ds.embeddings.ids, ds.x, ds.targets)}
    for part in (tr, te):
        for i, row, t in zip(part.embeddings.ids, part.x, part.targets):
            np.testing.assert_array_equal(lookup[i][0], row)
            assert lookup[i][1] == t


# -- scaler ------------------------------------------------------------------------


def test_scaler_population_convention():
    s = fit_scaler(np.array([[1.0], [3.0]]))
    assert s.mean[0] == 2.0 and s.std[0] == 1.0
    np.testing.assert_array_equal(s.transform(np.array([[1.0], [3.0]])).ravel(), [-1.0, 1.0])


def test_scaler_constant_column_untouched():
    x = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]])
    s = fit_scaler(x)
    assert s.constant.tolist() == [True, False]
    np.testing.assert_array_equal(s.transform(x)[:, 0], x[:, 0])


def test_scaler_standardizes_train(rng):
    x = rng.normal(3.0, 7.0, size=(200, 5))
    z = fit_scaler(x).transform(x)
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)


def test_scaler_inverse(rng):
    x = rng.normal(size=(10, 3)) * 100
    s = fit_scaler(x)
    np.testing.assert_allclose(s.inverse(s.transform(x)), x, rtol=0, atol=1e-12 * 100)


def test_scaler_never_reads_test_statistics():
    train = np.array([[0.0], [2.0]])
    test = np.array([[1e9], [-1e9]])
    s = fit_scaler(train)
    np.testing.assert_array_equal(s.transform(test).ravel(), [1e9 - 1.0, -1e9 - 1.0])


# -- synthetic generator ----------------------------------------------------------------


def test_synthetic_identity_case_is_exact():
    spec = SyntheticSpec(n=50, d=3, r=3, noise=0.0, nonlinearity="linear", loadings=np.eye(3), seed=2)
    ds, f, a = generate_synthetic(spec)
    np.testing.assert_array_equal(ds.x, f)
    np.testing.assert_array_equal(a, np.eye(3))


def test_synthetic_labels_balanced():
    ds, _, _ = generate_synthetic(SyntheticSpec(n=10000, d=8, r=2, seed=0))
    assert abs(ds.targets.mean() - 0.5) <= 0.05


def test_synthetic_oracle_accuracy_noise_free():
    ds, f, _ = generate_synthetic(SyntheticSpec(n=2000, d=8, r=4, noise=0.0, seed=1))
    model = fit_logistic(f[:, :1], ds.targets, n_classes=2)
    acc = np.mean(predict(model, f[:, :1]).argmax(axis=1) == ds.targets)
    assert acc >= 0.99


@pytest.mark.parametrize("loading", ["block", "dense"])
def test_synthetic_pca_recovers_loading_space(loading):
    spec = SyntheticSpec(n=500, d=12, r=3, noise=0.0, nonlinearity="linear", loading=loading, seed=4)
    ds, _, a = generate_synthetic(spec)
    comps = fit_pca(ds.x, 3).pca_components
    assert np.max(principal_angles(comps.T, a)) < 1e-6


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(n=40, d=6, r=2, task="anomaly", seed=8)
    (a, fa, _), (b, fb, _) = generate_synthetic(spec), generate_synthetic(spec)
    assert a.x.tobytes() == b.x.tobytes()
    assert np.array_equal(a.targets, b.targets) and np.array_equal(fa, fb)


def test_synthetic_anomaly_ratio():
    ds, _, _ = generate_synthetic(SyntheticSpec(n=1000, d=6, r=2, task="anomaly", seed=0))
    assert ds.targets.sum() == 50


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n=10, d=2, r=3)
    with pytest.raises(ValueError):
        SyntheticSpec(n=10, d=4, r=2, predictive=(2,))
