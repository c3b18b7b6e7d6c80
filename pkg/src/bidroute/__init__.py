"""Incentive-aware request routing for networks of model-serving agents."""

__version__ = "0.1.0"
