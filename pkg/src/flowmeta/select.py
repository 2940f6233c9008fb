"""Rule-based feature selection: missing ratio, zero entropy, low RF importance.

The random forest here is deliberately small: CART trees on Gini impurity,
bootstrap rows, per-split feature subsampling. It exists to rank features
by mean decrease in impurity, not to serve as a classifier in production.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, PreconditionError
from .table import FeatureMatrix

RULE_MISSING = "missing"
RULE_ZERO_ENTROPY = "zero_entropy"
RULE_LOW_IMPORTANCE = "low_importance"

MANIFEST_VERSION = 1


def missing_ratio(column) -> float:
    col = np.asarray(column, dtype=np.float64)
    if col.size == 0:
        raise PreconditionError("missing_ratio of an empty column")
    return float(np.isnan(col).sum()) / col.size


def entropy(column) -> float:
    """Shannon entropy (bits) of the distinct non-missing values."""
    col = np.asarray(column, dtype=np.float64)
    present = col[~np.isnan(col)]
    if present.size == 0:
        raise PreconditionError("entropy of a column with no present values")
    _, counts = np.unique(present, return_counts=True)
    if counts.size == 1:
        return 0.0
    p = counts / present.size
    return float(-(p * np.log2(p)).sum())


@dataclass(kw_only=True)
class ForestConfig:
    seed: int
    n_trees: int = 100
    max_depth: int = 12
    min_split: int = 5
    feature_subsample: float | None = None  # None -> sqrt(d)/d

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "min_split"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"ForestConfig.{name} must be positive")
        fs = self.feature_subsample
        if fs is not None and not 0.0 < fs <= 1.0:
            raise PreconditionError("ForestConfig.feature_subsample must lie in (0, 1]")

    def features_per_split(self, d: int) -> int:
        frac = math.sqrt(d) / d if self.feature_subsample is None else self.feature_subsample
        return max(1, min(d, int(round(frac * d))))


def _gini_from_counts(counts: np.ndarray, n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
        g = 1.0 - (p * p).sum(axis=-1)
    return np.where(n > 0, g, 0.0)


class GiniTree:
    """One CART tree; nodes are stored in flat lists."""

    def __init__(self, max_depth, min_split, n_split_features, rng):
        self.max_depth = max_depth
        self.min_split = min_split
        self.k = n_split_features
        self.rng = rng
        self.feature = []
        self.threshold = []
        self.children = []
        self.value = []

    def fit(self, X, y, n_classes):
        self.n_classes = n_classes
        self.importance = np.zeros(X.shape[1])
        self._n_root = len(y)
        self._grow(X, y, 0)
        return self

    def _leaf(self, y):
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.children.append((-1, -1))
        self.value.append(np.bincount(y, minlength=self.n_classes))
        return node

    def _grow(self, X, y, depth):
        node = self._leaf(y)
        n = len(y)
        counts = self.value[node]
        if depth >= self.max_depth or n < self.min_split or np.count_nonzero(counts) <= 1:
            return node
        split = self._best_split(X, y, counts)
        if split is None:
            return node
        f, thr, child_impurity = split
        parent_impurity = float(_gini_from_counts(counts[None, :], np.array([n]))[0])
        self.importance[f] += n / self._n_root * (parent_impurity - child_impurity)
        mask = X[:, f] <= thr
        left = self._grow(X[mask], y[mask], depth + 1)
        right = self._grow(X[~mask], y[~mask], depth + 1)
        self.feature[node] = f
        self.threshold[node] = thr
        self.children[node] = (left, right)
        return node

    def _best_split(self, X, y, counts):
        n = len(y)
        onehot = np.eye(self.n_classes)[y]
        best = None
        best_imp = np.inf
        evaluated = 0
        # Random visiting order doubles as random tie-breaking between features.
        for f in self.rng.permutation(X.shape[1]):
            if evaluated >= self.k:
                break
            x = X[:, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            valid = xs[:-1] < xs[1:]
            if not valid.any():
                continue  # constant in this node; does not use up the budget
            evaluated += 1
            left = np.cumsum(onehot[order], axis=0)[:-1]
            n_left = np.arange(1, n)
            right = counts[None, :] - left
            imp = (n_left * _gini_from_counts(left, n_left)
                   + (n - n_left) * _gini_from_counts(right, n - n_left)) / n
            imp = np.where(valid, imp, np.inf)
            i = int(np.argmin(imp))
            if imp[i] < best_imp:
                best_imp = float(imp[i])
                thr = (xs[i] + xs[i + 1]) / 2.0
                if not xs[i] <= thr < xs[i + 1]:
                    thr = xs[i]
                best = (int(f), float(thr), best_imp)
        return best

    def predict_counts(self, X):
        out = np.empty((X.shape[0], self.n_classes))
        for r, x in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                left, right = self.children[node]
                node = left if x[self.feature[node]] <= self.threshold[node] else right
            out[r] = self.value[node]
        return out


def _canonical_row_order(X, y) -> np.ndarray:
    """Sort rows by a content hash so results do not depend on input row order."""
    digests = [
        hashlib.blake2b(X[i].tobytes() + int(y[i]).to_bytes(4, "little"), digest_size=16).digest()
        for i in range(len(y))
    ]
    return np.array(sorted(range(len(y)), key=digests.__getitem__), dtype=int)


class RandomForest:
    def __init__(self, cfg: ForestConfig):
        self.cfg = cfg
        self.trees = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if np.isnan(X).any():
            raise PreconditionError("random forest input contains missing values; impute first")
        self.classes_, y = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise PreconditionError("random forest needs at least 2 classes")
        if len(y) < self.cfg.min_split:
            raise PreconditionError(
                f"{len(y)} rows is fewer than min_split={self.cfg.min_split}"
            )
        order = _canonical_row_order(X, y)
        X, y = X[order], y[order]
        k = self.cfg.features_per_split(X.shape[1])
        self.trees = []
        for t in range(self.cfg.n_trees):
            rng = np.random.default_rng(self.cfg.seed ^ t)
            rows = rng.integers(0, len(y), size=len(y))
            tree = GiniTree(self.cfg.max_depth, self.cfg.min_split, k, rng)
            self.trees.append(tree.fit(X[rows], y[rows], len(self.classes_)))
        return self

    @property
    def feature_importances_(self) -> np.ndarray:
        total = np.zeros(len(self.trees[0].importance))
        for tree in self.trees:
            s = tree.importance.sum()
            if s > 0:
                total += tree.importance / s
        s = total.sum()
        return total / s if s > 0 else total

    def predict(self, X):
        votes = sum(t.predict_counts(np.asarray(X, dtype=np.float64)) for t in self.trees)
        return self.classes_[np.argmax(votes, axis=1)]


def rf_importance(matrix: FeatureMatrix, cfg: ForestConfig) -> list:
    """Normalized mean-decrease-in-Gini importance per feature id."""
    if not matrix.labeled:
        raise PreconditionError("importance ranking needs a labeled matrix")
    forest = RandomForest(cfg).fit(matrix.values, matrix.labels)
    return list(zip(matrix.feature_ids, forest.feature_importances_.tolist()))


@dataclass
class SelectionReport:
    retained_ids: list
    removed: list  # of (feature_id, rule, statistic)
    medians: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)
    importances: dict = field(default_factory=dict)
    missing_threshold: float = 0.5
    bottom_fraction: float = 0.3
    forest: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def removed_by(self, rule) -> list:
        return [fid for fid, r, _ in self.removed if r == rule]

    def to_json(self) -> str:
        d = asdict(self)
        d["removed"] = [
            {"feature_id": fid, "rule": rule, "statistic": stat} for fid, rule, stat in self.removed
        ]
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"selection manifest is not JSON: {exc}") from None
        version = d.get("format_version")
        if version != MANIFEST_VERSION:
            raise FormatError(f"unknown selection manifest version {version!r}")
        d["removed"] = [(r["feature_id"], r["rule"], r["statistic"]) for r in d["removed"]]
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SelectionReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def impute(values: np.ndarray, medians) -> np.ndarray:
    out = np.array(values, dtype=np.float64, copy=True)
    for j, med in enumerate(medians):
        col = out[:, j]
        col[np.isnan(col)] = med
    return out


def select_features(
    matrix: FeatureMatrix,
    cfg: ForestConfig,
    missing_threshold: float = 0.5,
    bottom_fraction: float = 0.3,
) -> SelectionReport:
    """Apply the three removal rules in order and describe the outcome.

    Rule 3 drops floor(bottom_fraction * survivors) features with the
    lowest importance; ties go to the lexicographically smaller id.
    The report also carries the median, mean and std of every retained
    feature (after median imputation) for downstream preprocessing.
    """
    if matrix.n_rows == 0:
        raise PreconditionError("cannot select features on an empty matrix")
    removed = []
    survivors = []
    for j, fid in enumerate(matrix.feature_ids):
        ratio = missing_ratio(matrix.values[:, j])
        if ratio > missing_threshold:
            removed.append((fid, RULE_MISSING, ratio))
        else:
            survivors.append(fid)

    after_entropy = []
    for fid in survivors:
        col = matrix.column(fid)
        # An all-missing survivor (threshold >= 1) carries no information either.
        h = entropy(col) if not np.isnan(col).all() else 0.0
        if h == 0.0:
            removed.append((fid, RULE_ZERO_ENTROPY, h))
        else:
            after_entropy.append(fid)

    sub = matrix.subset(after_entropy)
    medians = [float(np.nanmedian(sub.values[:, j])) for j in range(len(after_entropy))]
    imputed = impute(sub.values, medians)

    n_drop = math.floor(bottom_fraction * len(after_entropy) + 1e-9)
    importances = {}
    dropped = set()
    if n_drop > 0:
        ranked = rf_importance(
            FeatureMatrix(feature_ids=after_entropy, values=imputed, labels=matrix.labels), cfg
        )
        importances = dict(ranked)
        for fid, imp in sorted(ranked, key=lambda t: (t[1], t[0]))[:n_drop]:
            removed.append((fid, RULE_LOW_IMPORTANCE, imp))
            dropped.add(fid)

    retained = [fid for fid in after_entropy if fid not in dropped]
    if not retained:
        raise PreconditionError("feature selection removed every feature")
    cols = [after_entropy.index(fid) for fid in retained]
    kept = imputed[:, cols]
    return SelectionReport(
        retained_ids=retained,
        removed=removed,
        medians={fid: medians[c] for fid, c in zip(retained, cols)},
        means={fid: float(v) for fid, v in zip(retained, kept.mean(axis=0))},
        stds={fid: float(v) for fid, v in zip(retained, kept.std(axis=0))},
        importances=importances,
        missing_threshold=missing_threshold,
        bottom_fraction=bottom_fraction,
        forest=asdict(cfg),
    )


def fit_preprocessing(matrix: FeatureMatrix, feature_ids=None) -> SelectionReport:
    """Manifest that keeps `feature_ids` (default: all) and only fits medians/means/stds."""
    ids = list(matrix.feature_ids if feature_ids is None else feature_ids)
    sub = matrix.subset(ids).values
    medians = [float(np.nanmedian(sub[:, j])) for j in range(len(ids))]
    kept = impute(sub, medians)
    return SelectionReport(
        retained_ids=ids,
        removed=[],
        medians=dict(zip(ids, medians)),
        means={f: float(v) for f, v in zip(ids, kept.mean(axis=0))},
        stds={f: float(v) for f, v in zip(ids, kept.std(axis=0))},
        missing_threshold=1.0,
        bottom_fraction=0.0,
    )
