"""Few-shot flow anomaly detection: flow features, feature selection, Meta-SGD."""

__version__ = "0.1.0"
