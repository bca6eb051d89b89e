"""Knee recess ultrasound CAD: scan-region preprocessing, a synthetic phantom
generator, one-stage detection and multi-task classification models, and the
cross-validation / evolutionary-tuning machinery around them."""

__version__ = "0.1.0"
