"""Desk-scale video-to-audio flow matching: an MM-DiT velocity model over
numpy autodiff, staged generation and editing, synthetic data and metrics."""

__version__ = "0.1.0"
