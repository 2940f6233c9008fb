"""Labeled feature tables and their CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PreconditionError

LABEL_COLUMN = "label"
MISSING_TOKENS = {"", "nan", "infinity", "-infinity", "inf", "-inf", "+infinity"}


@dataclass
class FeatureMatrix:
    """Feature columns with NaN marking missing values.

    `labels` is None for an unlabeled table.
    """

    feature_ids: list
    values: np.ndarray
    labels: list | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.values), len(self.feature_ids))
        if self.values.shape[1] != len(self.feature_ids):
            raise PreconditionError(
                f"{self.values.shape[1]} value slots for {len(self.feature_ids)} feature ids"
            )
        if self.labels is not None and len(self.labels) != self.values.shape[0]:
            raise PreconditionError("labels and rows differ in length")

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def column(self, fid) -> np.ndarray:
        return self.values[:, self.feature_ids.index(fid)]

    def subset(self, feature_ids=None, rows=None) -> "FeatureMatrix":
        cols = (
            list(range(len(self.feature_ids)))
            if feature_ids is None
            else [self.feature_ids.index(f) for f in feature_ids]
        )
        rows = np.arange(self.n_rows) if rows is None else np.asarray(rows, dtype=int)
        labels = None if self.labels is None else [self.labels[i] for i in rows]
        return FeatureMatrix(
            feature_ids=[self.feature_ids[c] for c in cols],
            values=self.values[np.ix_(rows, cols)],
            labels=labels,
        )


def format_real(value: float) -> str:
    """Nine significant digits; NaN and infinities as text tokens."""
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return "%.9g" % value


def parse_value(token: str) -> float:
    t = token.strip()
    if t.lower() in MISSING_TOKENS:
        return float("nan")
    return float(t)


def read_feature_csv(path) -> FeatureMatrix:
    """Load a feature CSV; a trailing ``label`` column makes it labeled.

    Missing sentinels (empty, NaN, +/-Infinity, any case) load as NaN.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV, no header row") from None
        labeled = LABEL_COLUMN in header
        if labeled and header.count(LABEL_COLUMN) > 1:
            raise FormatError(f"{path}: duplicate label column")
        label_pos = header.index(LABEL_COLUMN) if labeled else None
        ids = [h for h in header if h != LABEL_COLUMN]
        if len(set(ids)) != len(ids):
            raise FormatError(f"{path}: duplicate feature ids in header")
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            if labeled:
                labels.append(rec[label_pos])
                rec = rec[:label_pos] + rec[label_pos + 1:]
            try:
                rows.append([parse_value(t) for t in rec])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(ids))
    return FeatureMatrix(feature_ids=ids, values=values, labels=labels if labeled else None)


def write_feature_csv(matrix: FeatureMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(matrix.feature_ids) + ([LABEL_COLUMN] if matrix.labeled else []))
        for i, row in enumerate(matrix.values):
            cells = [format_real(float(v)) for v in row]
            if matrix.labeled:
                cells.append(matrix.labels[i])
            writer.writerow(cells)
