"""Recovery factor estimation with calibrated prediction intervals."""

__version__ = "0.1.0"
