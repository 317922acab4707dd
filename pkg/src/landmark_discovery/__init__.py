"""Unsupervised landmark discovery through inter/intra-subject conditional generation."""

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Raised for invalid configuration values or missing resources."""
