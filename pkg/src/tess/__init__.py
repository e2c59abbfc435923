"""Compact transformer encoder with cross-layer attention sharing, MLM pretraining and
few-shot fine-tuning evaluation, on a small numpy autodiff engine."""

__version__ = "0.1.0"
