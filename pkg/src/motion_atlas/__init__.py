"""Cardiac motion atlas: atlas-based LV motion descriptors and their
association with clinical covariates."""

__version__ = "0.1.0"
