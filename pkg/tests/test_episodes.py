import numpy as np
import pytest

from flowmeta.episodes import (
    ClassSplit,
    LabeledDataset,
    dataset_from_matrix,
    draw_test_classes,
    load_dataset,
    make_adaptation_task,
    preprocess,
    sample_episode,
    split_classes,
)
from flowmeta.errors import FormatError, PreconditionError
from flowmeta.flows import assemble_flows, export_features, extract_features
from flowmeta.pcap import FlowKey, PacketMeta
from flowmeta.select import SelectionReport, fit_preprocessing
from flowmeta.synthetic import make_synthetic
from flowmeta.table import FeatureMatrix, read_feature_csv


def toy_dataset(rows_per_class=(30, 2, 100), n_normal=400, seed=0):
    """Normal class plus anomaly classes a0, a1, ... with the given row counts."""
    rng = np.random.default_rng(seed)
    labels = ["BENIGN"] * n_normal
    for i, n in enumerate(rows_per_class):
        labels += [f"a{i}"] * n
    X = rng.normal(size=(len(labels), 3))
    m = FeatureMatrix(["f0", "f1", "f2"], X, labels)
    return dataset_from_matrix(m, fit_preprocessing(m))


@pytest.fixture(scope="module")
def synth():
    m = make_synthetic(seed=1)
    return dataset_from_matrix(m, fit_preprocessing(m))


def test_registry_and_normal_class():
    ds = toy_dataset()
    assert ds.class_names == ["BENIGN", "a0", "a1", "a2"]
    assert ds.normal_class == 0 and ds.anomaly_classes == [1, 2, 3]
    assert ds.normal_class not in ds.anomaly_classes


def test_preprocessing_uses_manifest_statistics():
    m = FeatureMatrix(["a", "b"], np.array([[1.0, 5.0], [np.nan, 5.0], [3.0, 5.0]]), ["BENIGN"] * 3)
    rep = fit_preprocessing(m)
    X = preprocess(m, rep)
    assert np.allclose(X[:, 0], np.array([-1.0, 0.0, 1.0]) / np.std([1.0, 2.0, 3.0]), rtol=1e-15)
    assert X[:, 1].tolist() == [0.0, 0.0, 0.0]  # zero std: centred, not scaled


def test_export_then_load_round_trip(tmp_path):
    pk = [PacketMeta(t, FlowKey("1.1.1.1", "2.2.2.2", 1, p, 6), 40, 10 * t, frozenset()) for t, p in
          [(1, 80), (2, 443), (3, 80), (5, 443)]]
    vecs = extract_features(assemble_flows(pk))
    export_features(vecs, tmp_path / "f.csv", labels=["BENIGN", "x"])
    m = read_feature_csv(tmp_path / "f.csv")
    rep = fit_preprocessing(m)
    rep.save(tmp_path / "sel.json")
    ds = load_dataset(tmp_path / "f.csv", tmp_path / "sel.json")
    assert np.array_equal(ds.X, preprocess(m, SelectionReport.load(tmp_path / "sel.json")))
    assert ds.class_names == ["BENIGN", "x"]


def test_unlabeled_csv(tmp_path):
    (tmp_path / "u.csv").write_text("a,b\n1,2\n")
    m = read_feature_csv(tmp_path / "u.csv")
    with pytest.raises(FormatError, match="unlabeled"):
        dataset_from_matrix(m, fit_preprocessing(m))


def test_manifest_mismatch_names_first_missing_id():
    m = FeatureMatrix(["a", "b"], np.zeros((2, 2)), ["BENIGN", "x"])
    rep = fit_preprocessing(FeatureMatrix(["a", "zz", "yy"], np.zeros((2, 3)), ["BENIGN", "x"]))
    with pytest.raises(FormatError, match="'zz'"):
        dataset_from_matrix(m, rep)


def test_no_normal_rows():
    m = FeatureMatrix(["a"], np.zeros((2, 1)), ["x", "y"])
    with pytest.raises(PreconditionError):
        dataset_from_matrix(m, fit_preprocessing(m))


def test_random_split_30_of_42(synth):
    split = split_classes(synth, n_test=12, seed=3)
    assert len(split.train_classes) == 30 and len(split.test_classes) == 12
    assert not set(split.train_classes) & set(split.test_classes)
    assert synth.normal_class not in split.train_classes + split.test_classes
    assert split == split_classes(synth, n_test=12, seed=3)


def test_split_by_names_agrees_with_draw(synth):
    names = draw_test_classes([synth.class_names[c] for c in synth.anomaly_classes], 12, 3)
    assert split_classes(synth, test_class_names=names) == split_classes(synth, n_test=12, seed=3)


def test_split_errors():
    ds = toy_dataset()
    with pytest.raises(PreconditionError):
        split_classes(ds, test_class_names=["a0", "a1", "a2"])
    with pytest.raises(PreconditionError):
        split_classes(ds, test_class_names=["nope"])
    with pytest.raises(PreconditionError):
        split_classes(ds, test_class_names=["BENIGN"])
    with pytest.raises(PreconditionError):
        split_classes(ds, test_class_names=["a0", "a0"])


def test_episode_shapes(synth):
    split = split_classes(synth, n_test=12, seed=0)
    ep = sample_episode(synth, split, K=5, M=10, N=10, seed=4)
    assert ep.K == 5 and len(ep.tasks) == 5
    classes = [t.anomaly_class for t in ep.tasks]
    assert len(set(classes)) == 5 and set(classes) <= set(split.train_classes)
    assert sorted(ep.slot_assignment.values()) == list(range(5))
    for slot, t in enumerate(ep.tasks):
        assert len(t.support) == 20 and len(t.validation) == 20
        assert sorted(set(t.support_y.tolist())) == [slot, 5]
        assert (t.support_y == slot).sum() == 10 and (t.val_y == slot).sum() == 10
        assert 6 not in t.support_y and 6 not in t.val_y
        assert not set(t.support_idx) & set(t.val_idx)
        assert np.all(synth.y[t.support_idx[t.support_y == slot]] == t.anomaly_class)
        assert np.all(synth.y[t.val_idx[t.val_y == 5]] == synth.normal_class)


def test_minimal_episode_splits_two_rows():
    ds = toy_dataset(rows_per_class=(2,))
    ep = sample_episode(ds, ClassSplit((1,), ()), K=1, M=1, N=1, seed=0)
    t = ep.tasks[0]
    anomaly_rows = list(t.support_idx[t.support_y == 0]) + list(t.val_idx[t.val_y == 0])
    assert sorted(anomaly_rows) == sorted(ds.rows_of(1).tolist())


def test_episode_is_deterministic(synth):
    split = split_classes(synth, n_test=12, seed=0)
    a = sample_episode(synth, split, 5, 10, 10, seed=[7, 0, 3])
    b = sample_episode(synth, split, 5, 10, 10, seed=[7, 0, 3])
    assert a.slot_assignment == b.slot_assignment
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.support_X.tobytes() == tb.support_X.tobytes()
        assert np.array_equal(ta.val_idx, tb.val_idx)


def test_insufficient_rows_name_the_class():
    ds = toy_dataset(rows_per_class=(30, 2, 100))
    with pytest.raises(PreconditionError, match="a1"):
        for s in range(50):
            sample_episode(ds, ClassSplit((1, 2, 3), ()), K=3, M=5, N=5, seed=s)
    with pytest.raises(PreconditionError):
        sample_episode(ds, ClassSplit((1, 2, 3), ()), K=4, M=1, N=1, seed=0)


def test_adaptation_task_sizes():
    ds = toy_dataset(rows_per_class=(100,))
    t = make_adaptation_task(ds, 1, M=20, seed=0, K=5)
    assert len(t.support) == 40 and len(t.validation) == 160
    assert (t.support_y == 6).sum() == 20 and (t.val_y == 6).sum() == 80
    assert set(np.unique(np.r_[t.support_y, t.val_y])) == {5, 6}
    assert not set(t.support_idx) & set(t.val_idx)


def test_adaptation_needs_validation_rows():
    ds = toy_dataset(rows_per_class=(20,))
    with pytest.raises(PreconditionError):
        make_adaptation_task(ds, 1, M=20, seed=0)


def test_labeled_dataset_checks_labels():
    with pytest.raises(PreconditionError):
        LabeledDataset(["a"], np.zeros((1, 1)), np.array([3]), ["BENIGN", "x"], 0)
