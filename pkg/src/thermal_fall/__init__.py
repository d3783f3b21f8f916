"""Thermal-video fall detection as adversarial spatio-temporal anomaly detection."""

__version__ = "0.1.0"
