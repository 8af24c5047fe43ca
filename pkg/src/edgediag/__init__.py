"""Cloud-to-edge cross-condition fault diagnosis toolkit.

Trains a large cloud-side CNN on one operating condition, transfers its
knowledge to a lightweight edge CNN through front-block weight sharing
plus LMMD-aligned fine-tuning with gradient-norm adaptive loss weights,
and reports diagnosis accuracy, model complexity and inference latency.
"""

__version__ = "0.1.0"
