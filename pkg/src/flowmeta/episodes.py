"""Labeled datasets, train/test class splits and episodic task sampling.

Label slots inside a task follow one fixed layout for a K-way setup:
slots 0..K-1 are the episode's anomaly classes (in sampling order), slot K
is normal traffic and slot K+1 is reserved for an unseen anomaly class at
adaptation time.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, PreconditionError
from .select import SelectionReport, impute
from .table import FeatureMatrix, read_feature_csv

DEFAULT_NORMAL_LABEL = "BENIGN"


@dataclass
class LabeledDataset:
    feature_ids: list
    X: np.ndarray
    y: np.ndarray
    class_names: list  # class id -> name
    normal_class: int
    _rows: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0 <= self.normal_class < len(self.class_names):
            raise PreconditionError("normal class id outside the registry")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise PreconditionError("row label outside the class registry")

    @property
    def registry(self) -> dict:
        return {name: i for i, name in enumerate(self.class_names)}

    @property
    def anomaly_classes(self) -> list:
        present = set(np.unique(self.y).tolist())
        return [c for c in range(len(self.class_names)) if c != self.normal_class and c in present]

    def rows_of(self, class_id) -> np.ndarray:
        if class_id not in self._rows:
            self._rows[class_id] = np.flatnonzero(self.y == class_id)
        return self._rows[class_id]

    def class_id(self, name) -> int:
        try:
            return self.registry[name]
        except KeyError:
            raise PreconditionError(f"unknown class {name!r}") from None

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.feature_ids).encode())
        h.update("\x1f".join(self.class_names).encode())
        h.update(np.ascontiguousarray(self.X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return h.hexdigest()


def preprocess(matrix: FeatureMatrix, report: SelectionReport) -> np.ndarray:
    """Retained columns, median-imputed, z-scored (zero-std columns only centred)."""
    missing = [fid for fid in report.retained_ids if fid not in matrix.feature_ids]
    if missing:
        raise FormatError(
            f"feature {missing[0]!r} from the manifest is absent from the data"
            + (f" (also missing: {', '.join(missing[1:])})" if len(missing) > 1 else "")
        )
    sub = matrix.subset(report.retained_ids).values
    ids = report.retained_ids
    X = impute(sub, [report.medians[f] for f in ids])
    mean = np.array([report.means[f] for f in ids])
    std = np.array([report.stds[f] for f in ids])
    scale = np.where(std > 0, std, 1.0)
    return (X - mean) / scale


def dataset_from_matrix(
    matrix: FeatureMatrix, report: SelectionReport, normal_label=DEFAULT_NORMAL_LABEL
) -> LabeledDataset:
    if not matrix.labeled:
        raise FormatError("data is unlabeled: no 'label' column")
    X = preprocess(matrix, report)
    names = sorted(set(matrix.labels))
    if normal_label not in names:
        raise PreconditionError(f"no rows of the normal class {normal_label!r}")
    ids = {n: i for i, n in enumerate(names)}
    y = np.array([ids[lab] for lab in matrix.labels], dtype=np.int64)
    return LabeledDataset(
        feature_ids=list(report.retained_ids),
        X=X,
        y=y,
        class_names=names,
        normal_class=ids[normal_label],
    )


def load_dataset(csv_path, manifest, normal_label=DEFAULT_NORMAL_LABEL) -> LabeledDataset:
    """Read a feature CSV and preprocess it with a selection manifest.

    `manifest` is a path or an already-loaded `SelectionReport`.
    """
    report = manifest if isinstance(manifest, SelectionReport) else SelectionReport.load(manifest)
    return dataset_from_matrix(read_feature_csv(csv_path), report, normal_label)


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple
    test_classes: tuple

    def names(self, dataset) -> dict:
        return {
            "train": [dataset.class_names[c] for c in self.train_classes],
            "test": [dataset.class_names[c] for c in self.test_classes],
        }


def draw_test_classes(anomaly_names, n_test: int, seed) -> list:
    """Seeded choice of `n_test` names; depends only on the sorted name set."""
    pool = sorted(set(anomaly_names))
    if not 0 < n_test < len(pool):
        raise PreconditionError(
            f"n_test={n_test} must leave both splits non-empty ({len(pool)} anomaly classes)"
        )
    picks = np.random.default_rng(seed).choice(len(pool), size=n_test, replace=False)
    return sorted(pool[i] for i in picks)


def split_classes(dataset: LabeledDataset, test_class_names=None, n_test=None, seed=None) -> ClassSplit:
    """Disjoint train/test anomaly classes, by explicit names or a seeded draw of `n_test`."""
    anomalies = dataset.anomaly_classes
    if test_class_names is not None:
        test = []
        for name in test_class_names:
            cid = dataset.class_id(name)
            if cid == dataset.normal_class:
                raise PreconditionError(f"normal class {name!r} cannot be a test class")
            if cid not in anomalies:
                raise PreconditionError(f"class {name!r} has no rows")
            if cid in test:
                raise PreconditionError(f"class {name!r} listed twice")
            test.append(cid)
    elif n_test is not None:
        if not 0 < n_test < len(anomalies):
            raise PreconditionError(
                f"n_test={n_test} must leave both splits non-empty ({len(anomalies)} anomaly classes)"
            )
        names = draw_test_classes([dataset.class_names[c] for c in anomalies], n_test, seed)
        test = [dataset.class_id(n) for n in names]
    else:
        raise PreconditionError("give test_class_names or n_test")
    train = [c for c in anomalies if c not in test]
    if not train:
        raise PreconditionError("split leaves no training classes")
    if not test:
        raise PreconditionError("split leaves no test classes")
    return ClassSplit(tuple(sorted(train)), tuple(sorted(int(c) for c in test)))


@dataclass(frozen=True)
class EpisodeTask:
    anomaly_class: int
    support_X: np.ndarray
    support_y: np.ndarray
    support_idx: np.ndarray
    val_X: np.ndarray
    val_y: np.ndarray
    val_idx: np.ndarray

    @property
    def support(self):
        return list(zip(self.support_X, self.support_y.tolist()))

    @property
    def validation(self):
        return list(zip(self.val_X, self.val_y.tolist()))


@dataclass(frozen=True)
class Episode:
    tasks: tuple
    slot_assignment: dict  # class id -> slot

    @property
    def K(self) -> int:
        return len(self.tasks)


def _task(dataset, cls, slot, normal_slot, anom_sup, anom_val, norm_sup, norm_val):
    sup_idx = np.concatenate([anom_sup, norm_sup])
    val_idx = np.concatenate([anom_val, norm_val])
    sup_y = np.concatenate([np.full(len(anom_sup), slot), np.full(len(norm_sup), normal_slot)])
    val_y = np.concatenate([np.full(len(anom_val), slot), np.full(len(norm_val), normal_slot)])
    return EpisodeTask(
        anomaly_class=int(cls),
        support_X=dataset.X[sup_idx],
        support_y=sup_y.astype(np.int64),
        support_idx=sup_idx,
        val_X=dataset.X[val_idx],
        val_y=val_y.astype(np.int64),
        val_idx=val_idx,
    )


def sample_episode(dataset: LabeledDataset, split: ClassSplit, K: int, M: int, N: int, seed) -> Episode:
    """K tasks, one per sampled training class, each with M+M support and N+N validation rows."""
    if K < 1 or M < 1 or N < 1:
        raise PreconditionError(f"K, M, N must be positive (got {K}, {M}, {N})")
    train = np.array(sorted(split.train_classes))
    if K > len(train):
        raise PreconditionError(f"K={K} exceeds the {len(train)} training classes")
    rng = np.random.default_rng(seed)
    classes = rng.choice(train, size=K, replace=False)
    normal_rows = dataset.rows_of(dataset.normal_class)
    if len(normal_rows) < K * (M + N):
        raise PreconditionError(
            f"normal class {dataset.class_names[dataset.normal_class]!r} has {len(normal_rows)} rows,"
            f" needs {K * (M + N)}"
        )
    picks = []
    for cls in classes:
        rows = dataset.rows_of(int(cls))
        if len(rows) < M + N:
            raise PreconditionError(
                f"class {dataset.class_names[int(cls)]!r} has {len(rows)} rows, needs {M + N}"
            )
        picks.append(rng.choice(rows, size=M + N, replace=False))
    normals = rng.choice(normal_rows, size=K * (M + N), replace=False).reshape(K, M + N)
    tasks = tuple(
        _task(dataset, cls, i, K, anom[:M], anom[M:], norm[:M], norm[M:])
        for i, (cls, anom, norm) in enumerate(zip(classes, picks, normals))
    )
    return Episode(tasks=tasks, slot_assignment={int(c): i for i, c in enumerate(classes)})


def make_adaptation_task(dataset: LabeledDataset, new_class: int, M: int, seed, K: int = 5) -> EpisodeTask:
    """Support: M rows of `new_class` (slot K+1) and M normal rows (slot K).

    Validation holds every other row of the class plus as many unused
    normal rows.
    """
    if M < 1:
        raise PreconditionError(f"M must be positive, got {M}")
    rng = np.random.default_rng(seed)
    rows = dataset.rows_of(new_class)
    name = dataset.class_names[new_class]
    if len(rows) <= M:
        raise PreconditionError(
            f"class {name!r} has {len(rows)} rows; M={M} leaves nothing for validation"
        )
    rows = rng.permutation(rows)
    rest = len(rows) - M
    normal_rows = dataset.rows_of(dataset.normal_class)
    if len(normal_rows) < M + rest:
        raise PreconditionError(
            f"normal class has {len(normal_rows)} rows, adaptation on {name!r} needs {M + rest}"
        )
    normals = rng.choice(normal_rows, size=M + rest, replace=False)
    return _task(dataset, new_class, K + 1, K, rows[:M], rows[M:], normals[:M], normals[M:])
