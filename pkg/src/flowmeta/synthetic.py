"""Synthetic few-shot benchmark: 2-D Gaussian clusters lifted into a higher dimension.

One normal class sits at the origin of the latent plane; each anomaly
class is a tighter cluster on a ring around it. A fixed random linear map
plus small isotropic noise lifts the latent points into `dim` features.
"""

from __future__ import annotations

import numpy as np

from .episodes import DEFAULT_NORMAL_LABEL
from .table import FeatureMatrix

SYNTHETIC_TAG = "synthetic"


def anomaly_names(n: int) -> list:
    return [f"family_{i:02d}" for i in range(n)]


def make_synthetic(
    seed: int = 0,
    n_anomaly_classes: int = 42,
    n_normal: int = 3000,
    rows_per_class=(80, 160),
    dim: int = 20,
    ring=(2.5, 6.0),
    noise: float = 0.05,
    with_degenerate_columns: bool = False,
    normal_label: str = DEFAULT_NORMAL_LABEL,
) -> FeatureMatrix:
    """Labeled feature matrix; rows grouped by class, normal first.

    `with_degenerate_columns` appends a constant column and a column that
    is 60% missing, which feature selection is expected to drop.
    """
    rng = np.random.default_rng(seed)
    lift = rng.normal(size=(2, dim)) / np.sqrt(2.0)
    offset = rng.normal(size=dim)

    latents = [rng.normal(scale=1.0, size=(n_normal, 2))]
    labels = [normal_label] * n_normal
    angles = rng.uniform(0.0, 2 * np.pi, size=n_anomaly_classes)
    radii = rng.uniform(*ring, size=n_anomaly_classes)
    spreads = rng.uniform(0.3, 0.8, size=n_anomaly_classes)
    sizes = rng.integers(rows_per_class[0], rows_per_class[1] + 1, size=n_anomaly_classes)
    for name, a, r, s, n in zip(anomaly_names(n_anomaly_classes), angles, radii, spreads, sizes):
        centre = r * np.array([np.cos(a), np.sin(a)])
        latents.append(centre + rng.normal(scale=s, size=(int(n), 2)))
        labels += [name] * int(n)
    Z = np.vstack(latents)
    X = Z @ lift + offset + rng.normal(scale=noise, size=(Z.shape[0], dim))
    ids = [f"f{j:02d}" for j in range(dim)]
    if with_degenerate_columns:
        const = np.full((X.shape[0], 1), 1.0)
        holey = rng.normal(size=(X.shape[0], 1))
        holey[rng.permutation(X.shape[0])[: int(round(0.6 * X.shape[0]))]] = np.nan
        X = np.hstack([X, const, holey])
        ids += ["constant", "mostly_missing"]
    return FeatureMatrix(feature_ids=ids, values=X, labels=labels)
