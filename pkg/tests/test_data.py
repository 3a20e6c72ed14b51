import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrcgat.data import (Dataset, InputScaler, ModalityPartition, load_csv, save_csv, synth_generate)
from mrcgat.errors import RowError, SchemaError


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEADER = "subject_id,label,rf_a,rf_b,cog_a,cog_b,cog_c,mri_a,mri_b\n"


def test_load_csv_partition(tmp_path):
    rows = "".join(f"s{i},{lab},1,2,3,4,5,6,{i}\n" for i, lab in enumerate(["CN", "MCI", "AD", "CN"]))
    ds = load_csv(_write(tmp_path, HEADER + rows))
    assert ds.n_features == 7
    assert ds.partition.ranges == {"RF": (0, 2), "COG": (2, 5), "MRI": (5, 7)}
    assert len(ds) == 4
    assert ds.labels.tolist() == [0, 1, 2, 0]


def test_load_csv_unlabeled(tmp_path):
    ds = load_csv(_write(tmp_path, HEADER + "s0,,1,2,3,4,5,6,7\ns1,AD,1,2,3,4,5,6,7\n"))
    assert ds.records[0].label is None
    assert ds.records[1].label == 2


def test_load_csv_missing_group(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, "subject_id,label,rf_a,cog_a\ns0,CN,1,2\n"))


def test_load_csv_non_numeric_row(tmp_path):
    with pytest.raises(RowError) as exc:
        load_csv(_write(tmp_path, HEADER + "s0,CN,1,2,3,4,5,6,7\ns1,CN,1,x,3,4,5,6,7\n"))
    assert exc.value.line == 3


@pytest.mark.parametrize("cell", ["", "nan", "inf"])
def test_load_csv_rejects_missing_and_nonfinite(tmp_path, cell):
    with pytest.raises(RowError):
        load_csv(_write(tmp_path, HEADER + f"s0,CN,1,{cell},3,4,5,6,7\n"))


def test_load_csv_duplicate_id(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, HEADER + "s0,CN,1,2,3,4,5,6,7\ns0,AD,1,2,3,4,5,6,7\n"))


def test_load_csv_non_contiguous_prefix(tmp_path):
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, "subject_id,label,rf_a,cog_a,rf_b,mri_a\ns0,CN,1,2,3,4\n"))


def test_load_csv_unknown_label(tmp_path):
    with pytest.raises(RowError):
        load_csv(_write(tmp_path, HEADER + "s0,XX,1,2,3,4,5,6,7\n"))


def test_synth_deterministic():
    a = synth_generate(7, 50, (5, 8, 20), 3.0)
    b = synth_generate(7, 50, (5, 8, 20), 3.0)
    assert a == b
    assert a.features.tobytes() == b.features.tobytes()
    assert synth_generate(8, 50, (5, 8, 20), 3.0) != a


@pytest.mark.parametrize("sep", [0.0, 1.0, 5.0])
def test_synth_shape_and_counts(sep):
    ds = synth_generate(1, 13, (2, 3, 4), sep)
    assert ds.features.shape == (39, 9)
    assert np.all(np.isfinite(ds.features))
    assert ds.class_counts().tolist() == [13, 13, 13]
    assert ds.partition.dims == (2, 3, 4)


def test_synth_marginals_non_gaussian():
    ds = synth_generate(0, 200, (5, 8, 20), 0.0)
    rf = ds.features[:, ds.partition.slice("RF")]
    mri = ds.features[:, ds.partition.slice("MRI")]
    assert rf.min() > 0  # log-normal support
    assert 0 <= mri.min() and mri.max() <= 1000  # scaled beta support


def _one_nn_cv(ds, folds=5):
    x, y = ds.features, ds.labels
    fold = np.zeros(len(y), int)
    for c in range(ds.n_classes):
        m = np.where(y == c)[0]
        fold[m] = np.arange(len(m)) % folds
    accs = []
    for f in range(folds):
        te, tr = np.where(fold == f)[0], np.where(fold != f)[0]
        d = ((x[te][:, None, :] - x[tr][None]) ** 2).sum(-1)
        accs.append(float((y[tr][d.argmin(1)] == y[te]).mean()))
    return float(np.mean(accs))


def test_synth_separable_regime_one_nn():
    assert _one_nn_cv(synth_generate(7, 100, (5, 8, 20), 5.0)) > 0.9


def test_synth_no_signal_chance():
    acc = _one_nn_cv(synth_generate(7, 100, (5, 8, 20), 0.0))
    assert abs(acc - 1 / 3) < 0.1


def test_synth_signal_placement():
    ds = synth_generate(3, 100, (4, 4, 4), 5.0, signal=("COG",))
    y = ds.labels
    for g, expect_signal in [("RF", False), ("COG", True), ("MRI", False)]:
        block = ds.features[:, ds.partition.slice(g)]
        means = np.array([np.median(block[y == c], axis=0) for c in range(3)])
        spread = np.abs(means[2] - means[0]).max() / block.std(axis=0).max()
        assert (spread > 0.5) == expect_signal, g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.lists(st.integers(1, 4), min_size=3, max_size=3),
       st.floats(0, 6), st.data())
def test_csv_round_trip(tmp_path_factory, seed, n, dims, sep, data):
    ds = synth_generate(seed, n, dims, sep)
    drop = data.draw(st.lists(st.integers(0, len(ds) - 1), max_size=3))
    ds = ds.with_labels([None if i in drop else int(lab) for i, lab in enumerate(ds.labels)])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    save_csv(ds, path)
    assert load_csv(path) == ds


def test_round_trip_binary(tmp_path):
    ds = synth_generate(2, 5, (1, 2, 3), 2.0).restrict_classes(["CN", "AD"])
    assert ds.class_names == ("CN", "AD")
    assert set(ds.labels.tolist()) == {0, 1}
    save_csv(ds, tmp_path / "b.csv")
    assert load_csv(tmp_path / "b.csv", classes=ds.class_names) == ds


@given(st.lists(st.integers(1, 30), min_size=3, max_size=3))
def test_partition_tiles(dims):
    p = ModalityPartition.from_dims(dims)
    covered = sorted(c for g in ("RF", "COG", "MRI") for c in range(*p.ranges[g]))
    assert covered == list(range(sum(dims)))


def test_partition_rejects_gap():
    with pytest.raises(SchemaError):
        ModalityPartition({"RF": (0, 2), "COG": (3, 5), "MRI": (5, 6)})


def test_dataset_rejects_nonfinite():
    with pytest.raises(SchemaError):
        Dataset(["a"], [0], [[1.0, np.nan, 2.0]], ModalityPartition.from_dims((1, 1, 1)))


def test_input_scaler_fit_apply_round_trip():
    x = np.array([[1.0, 5.0, 2.0], [3.0, 5.0, 4.0], [5.0, 5.0, 9.0]])
    sc = InputScaler.fit(x)
    z = sc.apply(x)
    assert np.allclose(z.mean(axis=0), 0) and np.allclose(z[:, [0, 2]].std(axis=0), 1)
    assert sc.scale[1] == 1.0 and np.all(z[:, 1] == 0)
    again = InputScaler.from_dict(sc.to_dict())
    assert np.array_equal(again.mean, sc.mean) and np.array_equal(again.scale, sc.scale)
    assert InputScaler.from_dict(None) is None


@pytest.mark.parametrize("doc", [{"mean": [0.0, 1.0], "scale": [1.0]},
                                 {"mean": [0.0], "scale": [0.0]},
                                 {"mean": [float("nan")], "scale": [1.0]}])
def test_input_scaler_rejects_bad_documents(doc):
    with pytest.raises(SchemaError):
        InputScaler.from_dict(doc)
