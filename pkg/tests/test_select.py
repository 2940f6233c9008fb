import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowmeta.errors import FormatError, PreconditionError
from flowmeta.select import (
    RULE_LOW_IMPORTANCE,
    RULE_MISSING,
    RULE_ZERO_ENTROPY,
    ForestConfig,
    GiniTree,
    RandomForest,
    SelectionReport,
    entropy,
    fit_preprocessing,
    impute,
    missing_ratio,
    rf_importance,
    select_features,
)
from flowmeta.table import FeatureMatrix, read_feature_csv

NAN = float("nan")


def test_missing_ratio_examples():
    assert missing_ratio([NAN] * 6 + [1.0] * 4) == 0.6
    assert missing_ratio([1.0, 2.0]) == 0.0
    assert missing_ratio([NAN, NAN]) == 1.0
    with pytest.raises(PreconditionError):
        missing_ratio([])


def test_entropy_examples():
    assert entropy([3.0] * 7) == 0.0
    assert entropy([0, 1, 0, 1]) == 1.0
    assert entropy([5, 5, 6, 7]) == 1.5
    assert entropy([1.0, NAN, 2.0]) == 1.0  # missing values are ignored
    with pytest.raises(PreconditionError):
        entropy([NAN, NAN])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40))
def test_entropy_non_negative_and_zero_iff_constant(values):
    h = entropy(values)
    assert h >= 0.0
    assert (h == 0.0) == (len(set(values)) == 1)
    assert h <= math.log2(len(set(values))) + 1e-12


def best_stump_gain(x, y):
    """Exhaustive single-split Gini gain: the oracle for a one-level tree."""
    def gini(lab):
        if len(lab) == 0:
            return 0.0
        p = np.bincount(lab, minlength=2) / len(lab)
        return 1.0 - float((p ** 2).sum())

    base, best = gini(y), 0.0
    for t in np.unique(x)[:-1]:
        left, right = y[x <= t], y[x > t]
        gain = base - (len(left) * gini(left) + len(right) * gini(right)) / len(y)
        best = max(best, gain)
    return best


def test_determining_feature_outranks_noise():
    rng = np.random.default_rng(11)
    a = rng.normal(size=300)
    b = rng.normal(size=300)
    y = (a > 0.2).astype(int)
    assert best_stump_gain(a, y) > best_stump_gain(b, y)
    imp = dict(rf_importance(FeatureMatrix(["A", "B"], np.c_[a, b], list(y)), ForestConfig(seed=3, n_trees=30)))
    assert imp["A"] > imp["B"]
    assert math.isclose(sum(imp.values()), 1.0)


def test_duplicate_column_shares_importance():
    rng = np.random.default_rng(0)
    n = 600
    a, n1, n2 = rng.normal(size=(3, n))
    y = (a + 0.5 * rng.normal(size=n) > 0).astype(int)
    cfg = ForestConfig(seed=1, n_trees=200, feature_subsample=1.0, max_depth=6)
    both = RandomForest(cfg).fit(np.c_[a, a, n1, n2], y).feature_importances_
    alone = RandomForest(cfg).fit(np.c_[a, n1, n2], y).feature_importances_
    # The pair together carries what A alone carried; each copy gets about half.
    assert abs((both[0] + both[1]) / alone[0] - 1.0) <= 0.25
    assert abs(both[0] / (both[0] + both[1]) - 0.5) <= 0.25


def test_random_labels_spread_importance():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(2000, 5))
    y = rng.integers(0, 2, size=2000)
    imp = rf_importance(FeatureMatrix(list("abcde"), X, list(y)), ForestConfig(seed=2, n_trees=30))
    assert max(v for _, v in imp) < 0.5


def test_single_class_rejected():
    with pytest.raises(PreconditionError):
        rf_importance(FeatureMatrix(["a"], np.ones((10, 1)), ["x"] * 10), ForestConfig(seed=0))


def test_forest_needs_imputed_input():
    with pytest.raises(PreconditionError):
        RandomForest(ForestConfig(seed=0)).fit(np.array([[NAN], [1.0]] * 5), [0, 1] * 5)


def test_forest_config_validation():
    with pytest.raises(PreconditionError):
        ForestConfig(seed=0, n_trees=0)
    with pytest.raises(PreconditionError):
        ForestConfig(seed=0, feature_subsample=1.5)
    assert ForestConfig(seed=0).features_per_split(16) == 4
    with pytest.raises(TypeError):
        ForestConfig()  # the seed is mandatory


def test_tree_predicts_separable_data():
    X = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    tree = GiniTree(max_depth=3, min_split=2, n_split_features=1, rng=np.random.default_rng(0)).fit(X, y, 2)
    assert np.argmax(tree.predict_counts(X), axis=1).tolist() == y.tolist()


def test_matches_sklearn_ranking():
    sklearn = pytest.importorskip("sklearn.ensemble")
    rng = np.random.default_rng(4)
    X = rng.normal(size=(800, 6))
    y = (2 * X[:, 0] + X[:, 1] + 0.3 * rng.normal(size=800) > 0).astype(int)
    ours = RandomForest(ForestConfig(seed=0, n_trees=100, max_depth=8)).fit(X, y).feature_importances_
    ref = sklearn.RandomForestClassifier(n_estimators=200, max_depth=8, min_samples_split=5,
                                         max_features="sqrt", random_state=0).fit(X, y).feature_importances_
    assert np.argsort(ours)[-2:].tolist() == np.argsort(ref)[-2:].tolist()
    assert np.corrcoef(ours, ref)[0, 1] > 0.95


def matrix_fixture(seed=0, n=400):
    rng = np.random.default_rng(seed)
    key = rng.normal(size=n)
    labels = np.where(key > 0.3, "attack", np.where(key < -0.8, "scan", "BENIGN"))
    cols = {"key": key}
    for j in range(9):
        cols[f"x{j}"] = rng.normal(size=n) + (0.2 * j / 9) * key
    holey = rng.normal(size=n)
    holey[rng.permutation(n)[: int(0.6 * n)]] = NAN
    cols["holey"] = holey
    cols["flat"] = np.full(n, 7.0)
    ids = list(cols)
    return FeatureMatrix(ids, np.column_stack([cols[i] for i in ids]), labels.tolist())


def test_selection_rules_cascade():
    m = matrix_fixture()
    rep = select_features(m, ForestConfig(seed=9, n_trees=40))
    assert rep.removed_by(RULE_MISSING) == ["holey"]
    assert rep.removed_by(RULE_ZERO_ENTROPY) == ["flat"]
    assert len(rep.removed_by(RULE_LOW_IMPORTANCE)) == 3
    assert "key" in rep.retained_ids
    assert rep.retained_ids == [f for f in m.feature_ids if f in rep.retained_ids]
    ids = rep.retained_ids + [f for f, _, _ in rep.removed]
    assert sorted(ids) == sorted(m.feature_ids) and len(ids) == len(set(ids))


def test_rules_disabled_keep_everything():
    m = matrix_fixture().subset([f"x{j}" for j in range(5)] + ["key"])
    rep = select_features(m, ForestConfig(seed=0), missing_threshold=1.0, bottom_fraction=0.0)
    assert rep.retained_ids == m.feature_ids and rep.removed == []


def test_importance_ties_remove_smaller_id_first():
    rng = np.random.default_rng(1)
    key = rng.normal(size=60)
    # `key` separates the classes perfectly, so the unused columns tie at exactly 0.
    X = np.c_[rng.normal(size=60), key, rng.normal(size=60)]
    labels = ["u" if k > 0 else "v" for k in key]
    rep = select_features(FeatureMatrix(["z2", "key", "z1"], X, labels),
                          ForestConfig(seed=0, n_trees=5, feature_subsample=1.0), bottom_fraction=0.34)
    assert rep.importances["z1"] == rep.importances["z2"] == 0.0
    assert rep.removed_by(RULE_LOW_IMPORTANCE) == ["z1"]


def test_selection_removing_everything_fails():
    m = FeatureMatrix(["c"], np.ones((10, 1)), ["a", "b"] * 5)
    with pytest.raises(PreconditionError):
        select_features(m, ForestConfig(seed=0))


def test_rules_one_and_two_are_idempotent():
    m = matrix_fixture(seed=3)
    rep = select_features(m, ForestConfig(seed=1, n_trees=20))
    again = select_features(m.subset(rep.retained_ids), ForestConfig(seed=1, n_trees=20))
    assert again.removed_by(RULE_MISSING) == [] and again.removed_by(RULE_ZERO_ENTROPY) == []


def test_row_order_does_not_matter():
    m = matrix_fixture(seed=2, n=200)
    perm = np.random.default_rng(0).permutation(m.n_rows)
    shuffled = m.subset(rows=perm)
    for j in range(len(m.feature_ids)):
        assert missing_ratio(m.values[:, j]) == missing_ratio(shuffled.values[:, j])
        if not np.isnan(m.values[:, j]).all():
            assert entropy(m.values[:, j]) == entropy(shuffled.values[:, j])
    cfg = ForestConfig(seed=4, n_trees=15)
    a = select_features(m, cfg)
    b = select_features(shuffled, cfg)
    assert a.importances == b.importances and a.retained_ids == b.retained_ids


def test_seeded_selection_is_deterministic():
    m = matrix_fixture(seed=6, n=200)
    cfg = ForestConfig(seed=12, n_trees=10)
    assert select_features(m, cfg).to_json() == select_features(m, cfg).to_json()


def test_report_round_trip(tmp_path):
    rep = select_features(matrix_fixture(n=150), ForestConfig(seed=0, n_trees=5))
    rep.save(tmp_path / "sel.json")
    back = SelectionReport.load(tmp_path / "sel.json")
    assert back == rep
    assert back.forest["seed"] == 0 and back.missing_threshold == 0.5


def test_report_version_is_checked():
    text = select_features(matrix_fixture(n=100), ForestConfig(seed=0, n_trees=3)).to_json()
    with pytest.raises(FormatError):
        SelectionReport.from_json(text.replace('"format_version": 1', '"format_version": 99'))


def test_medians_imputed_and_statistics_stored():
    m = FeatureMatrix(["a", "b"], np.array([[1.0, NAN], [3.0, 4.0], [5.0, 8.0], [7.0, NAN]]), ["x", "y"] * 2)
    rep = fit_preprocessing(m)
    assert rep.medians == {"a": 4.0, "b": 6.0}
    filled = impute(m.values, [4.0, 6.0])
    assert filled[:, 1].tolist() == [6.0, 4.0, 8.0, 6.0]
    assert rep.means["b"] == 6.0 and math.isclose(rep.stds["b"], math.sqrt(2.0))


def test_csv_missing_sentinels(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b,label\n,NaN,x\ninfinity,-Infinity,y\n1,2,x\n")
    m = read_feature_csv(p)
    assert np.isnan(m.values[:2]).all() and m.values[2].tolist() == [1.0, 2.0]
