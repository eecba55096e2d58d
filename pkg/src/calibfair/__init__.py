"""Calibration-bias mitigation by gap clustering and group-wise focal loss."""

__version__ = "0.1.0"
