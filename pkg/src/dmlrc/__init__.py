"""Double/debiased machine learning with regression calibration."""
__version__ = "0.1.0"
