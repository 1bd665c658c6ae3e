"""Open-vocabulary video anomaly detection on frame-feature sequences."""

__version__ = "0.1.0"
