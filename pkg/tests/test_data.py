import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtcnn.data import (FeatureTable, ParseError, SchemaError, ScalerParams, StratificationError,
                        WindowedDataset, build_manifest, encode_labels, load_feature_csv, load_manifest_splits,
                        make_windows, minmax_apply, minmax_fit, prepare_table, read_manifest, stratified_split,
                        synth_generate, write_manifest)


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def labelled_table(labels, n_features=2, segments=None):
    n = len(labels)
    feats = np.arange(n * n_features, dtype=float).reshape(n, n_features)
    t = FeatureTable(feats, np.array(labels, dtype=object), [f"f{i}" for i in range(n_features)],
                     None if segments is None else np.array(segments, dtype=object))
    return encode_labels(t)


# -- ingestion ------------------------------------------------------------------------

def test_load_simple(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "b", "c", "LABEL"], [[1, 2, 3, "REAL"], [4, 5, 6.5, "FAKE"]])
    t = load_feature_csv(p)
    assert len(t) == 2 and t.n_features == 3
    assert t.features.tolist() == [[1, 2, 3], [4, 5, 6.5]]
    assert t.labels.tolist() == ["REAL", "FAKE"]
    assert t.feature_names == ["a", "b", "c"]


def test_load_label_only(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["LABEL"], [["REAL"]])
    with pytest.raises(SchemaError, match="zero feature"):
        load_feature_csv(p)


def test_load_missing_label_column(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "class"], [[1, "x"]])
    with pytest.raises(SchemaError, match="LABEL"):
        load_feature_csv(p)


def test_load_custom_label_column(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["class", "a"], [["x", 1]])
    assert load_feature_csv(p, label_column="class").n_features == 1


def test_load_non_numeric_reports_position(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "b", "LABEL"], [[1, 2, "REAL"], [3, "oops", "FAKE"]])
    with pytest.raises(ParseError) as exc:
        load_feature_csv(p)
    assert exc.value.row == 3 and exc.value.column == "b"


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_feature_csv(tmp_path / "nope.csv")


def test_load_segment_column(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["SEGMENT", "a", "LABEL"], [["s1", 1, "REAL"], ["s2", 2, "REAL"]])
    t = load_feature_csv(p)
    assert t.n_features == 1 and t.segments.tolist() == ["s1", "s2"]


# -- labels -----------------------------------------------------------------------------

def test_encode_lexicographic():
    t = labelled_table(["REAL", "FAKE", "REAL"])
    assert t.label_map == {"FAKE": 0, "REAL": 1}
    assert t.labels.tolist() == [1, 0, 1]


def test_encode_three_classes():
    with pytest.raises(SchemaError, match="3"):
        labelled_table(["a", "b", "c"])


def test_encode_idempotent():
    once = labelled_table(["1", "0", "1"])
    twice = encode_labels(once)
    assert twice.labels.tolist() == once.labels.tolist() == [1, 0, 1]
    assert twice.label_map == {"0": 0, "1": 1}


# -- scaling ---------------------------------------------------------------------------------

def test_minmax_linear():
    params = minmax_fit(np.array([[2.0], [4.0], [6.0]]))
    assert minmax_apply(params, np.array([[2.0], [4.0], [6.0]])).ravel().tolist() == [0, 0.5, 1]


def test_minmax_degenerate():
    params = minmax_fit(np.array([[5.0], [5.0]]))
    assert params.degenerate.tolist() == [True]
    assert minmax_apply(params, np.array([[5.0], [5.0]])).ravel().tolist() == [0, 0]


def test_minmax_clamps():
    params = ScalerParams([2.0], [6.0])
    assert minmax_apply(params, np.array([[8.0], [-1.0]])).ravel().tolist() == [1.0, 0.0]


def test_minmax_empty_fit():
    with pytest.raises(ValueError):
        minmax_fit(np.empty((0, 3)))


def test_minmax_fit_rows_only():
    t = labelled_table(["a", "b", "a", "b"], n_features=1)
    params = minmax_fit(t, rows=[0, 1])
    assert params.minimum.tolist() == [0.0] and params.maximum.tolist() == [1.0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30))
def test_minmax_range_property(seed, n):
    rng = np.random.default_rng(seed)
    fit = rng.standard_normal((n, 4)) * 10
    params = minmax_fit(fit)
    scaled = minmax_apply(params, fit)
    assert scaled.min() >= 0 and scaled.max() <= 1
    other = minmax_apply(params, rng.standard_normal((n, 4)) * 30)
    assert other.min() >= 0 and other.max() <= 1


# -- windows -----------------------------------------------------------------------------------

def test_windows_single_segment():
    ds = make_windows(labelled_table(["a"] * 10 + ["b"] * 5), 5)
    assert len(ds) == 6 + 1
    assert ds.x.shape == (7, 5, 2)


def test_windows_identity():
    t = labelled_table(["a", "a", "b", "b", "a"])
    ds = make_windows(t, 1)
    assert len(ds) == 5
    assert np.array_equal(ds.x[:, 0, :], t.features)


def test_windows_respect_segments():
    # s1 and s2 share a label; windows must still stop at the boundary
    t = labelled_table(["a"] * 13 + ["b"] * 5, segments=["s1"] * 7 + ["s2"] * 6 + ["s3"] * 5)
    ds = make_windows(t, 5)
    assert len(ds) == 3 + 2 + 1
    assert ds.starts.tolist() == [0, 1, 2, 7, 8, 13]


def test_windows_short_segment_warns():
    t = labelled_table(["a"] * 3 + ["b"] * 6)
    with pytest.warns(UserWarning, match="no windows"):
        ds = make_windows(t, 5)
    assert len(ds) == 2


@settings(max_examples=40, deadline=None)
@given(lengths=st.lists(st.integers(1, 12), min_size=1, max_size=6), w=st.integers(1, 6))
def test_window_count_and_purity(lengths, w):
    labels = []
    for k, n in enumerate(lengths):
        labels += ["a" if k % 2 == 0 else "b"] * n
    if len(set(labels)) < 2:
        labels.append("b")
        lengths = lengths + [1]
    t = labelled_table(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = make_windows(t, w)
    assert len(ds) == sum(max(0, n - w + 1) for n in lengths)
    frames = ds.starts[:, None] + np.arange(w)
    assert np.all(t.labels[frames] == ds.y[:, None])


# -- splits ------------------------------------------------------------------------------------

def _dataset(n0, n1):
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    return WindowedDataset(np.zeros((n0 + n1, 1, 1)), y, np.arange(n0 + n1))


def test_split_exact():
    s = stratified_split(_dataset(50, 50), (0.8, 0.1, 0.1), seed=1)
    assert [len(p) for p in s] == [80, 10, 10]
    for part in s:
        assert part.y.mean() == 0.5


def test_split_seeded():
    a = stratified_split(_dataset(40, 30), seed=9)
    b = stratified_split(_dataset(40, 30), seed=9)
    for pa, pb in zip(a, b):
        assert pa.starts.tolist() == pb.starts.tolist()


def test_split_odd_counts():
    s = stratified_split(_dataset(51, 50), (0.8, 0.1, 0.1), seed=1)
    for part, r in zip(s, (0.8, 0.1, 0.1)):
        n0, n1 = part.class_counts()
        assert abs(n0 - 51 * r) <= 1 and abs(n1 - 50 * r) <= 1


def test_split_too_few():
    with pytest.raises(StratificationError):
        stratified_split(_dataset(10, 2), seed=0)


def test_split_bad_ratios():
    with pytest.raises(ValueError):
        stratified_split(_dataset(10, 10), (0.5, 0.5, 0.5))


@settings(max_examples=40, deadline=None)
@given(n0=st.integers(3, 200), n1=st.integers(3, 200), seed=st.integers(0, 1000))
def test_split_partition_and_balance(n0, n1, seed):
    ratios = (0.7, 0.2, 0.1)
    s = stratified_split(_dataset(n0, n1), ratios, seed)
    members = np.concatenate([p.starts for p in s])
    assert sorted(members.tolist()) == list(range(n0 + n1))
    for part, r in zip(s, ratios):
        c0, c1 = part.class_counts()
        assert abs(c0 - n0 * r) <= 1 and abs(c1 - n1 * r) <= 1


# -- synthetic -----------------------------------------------------------------------------

def test_synth_deterministic():
    a, b = synth_generate(20, 5, 26, 3.0, seed=4), synth_generate(20, 5, 26, 3.0, seed=4)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tolist() == b.y.tolist()


def test_synth_separable_threshold():
    ds = synth_generate(500, 5, 26, 6.0, seed=0)
    score = ds.x.reshape(len(ds), -1).mean(axis=1)
    assert np.mean((score > 0) == (ds.y == 1)) > 0.99


def test_synth_indistinguishable():
    ds = synth_generate(2000, 5, 26, 0.0, seed=0)
    score = ds.x.reshape(len(ds), -1).mean(axis=1)
    assert abs(np.mean((score > 0) == (ds.y == 1)) - 0.5) < 0.03


def test_synth_negative_separation():
    with pytest.raises(ValueError):
        synth_generate(5, 1, 1, -1.0)


# -- full preparation + manifest ----------------------------------------------------------------

def _feature_csv(tmp_path, n=60, f=4, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        label = "FAKE" if (i // 10) % 2 == 0 else "REAL"
        rows.append(list(np.round(rng.standard_normal(f) + (label == "REAL"), 6)) + [label])
    return write_csv(tmp_path / "feat.csv", [f"f{i}" for i in range(f)] + ["LABEL"], rows)


def test_prepare_table_scaler_on_train(tmp_path):
    table = encode_labels(load_feature_csv(_feature_csv(tmp_path)))
    splits, scaler = prepare_table(table, 3, seed=5)
    assert splits.train.x.min() == 0.0 and splits.train.x.max() == 1.0
    for part in splits:
        assert part.x.min() >= 0 and part.x.max() <= 1
    assert len(splits.train) + len(splits.validation) + len(splits.test) == 6 * 8


def test_manifest_roundtrip(tmp_path):
    path = _feature_csv(tmp_path)
    table = encode_labels(load_feature_csv(path))
    splits, scaler = prepare_table(table, 3, seed=5)
    from qtcnn.data import file_sha256
    source = {"kind": "csv", "path": "feat.csv", "sha256": file_sha256(path), "label_column": "LABEL",
              "segment_column": "SEGMENT"}
    manifest = build_manifest(source, splits, scaler, window=3, n_features=4, label_map=table.label_map,
                              ratios=(0.8, 0.1, 0.1), seeds={"split": 5}, config={})
    write_manifest(manifest, tmp_path / "manifest.json")
    back = load_manifest_splits(read_manifest(tmp_path / "manifest.json"), base_dir=tmp_path)
    for a, b in zip(splits, back):
        assert a.x.tobytes() == b.x.tobytes() and a.y.tolist() == b.y.tolist()


def test_manifest_detects_changed_source(tmp_path):
    path = _feature_csv(tmp_path)
    manifest = {"format": "qtcnn-dataset-manifest", "version": 1, "window": 3, "n_features": 4,
                "scaler": ScalerParams([0] * 4, [1] * 4).to_dict(),
                "source": {"kind": "csv", "path": str(path), "sha256": "0" * 64, "label_column": "LABEL"},
                "splits": {"train": [], "validation": [], "test": []}}
    with pytest.raises(SchemaError, match="changed"):
        load_manifest_splits(manifest)
