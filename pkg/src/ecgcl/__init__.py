"""Patient-aware contrastive pretraining for multi-lead ECG frames."""

__version__ = "0.1.0"
