"""Risk-calibrated step-level routing between a cheap local policy and an
expensive teacher, evaluated on a synthetic perturbed-POMDP harness."""

__version__ = "0.1.0"
