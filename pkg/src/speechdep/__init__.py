"""Speech-based depression screening with encoder-only transfer from ASR pretraining."""

__version__ = "0.1.0"
