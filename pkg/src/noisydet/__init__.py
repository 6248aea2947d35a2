"""Label-noise injection, co-teaching selection and evaluation for anchor detectors."""

__version__ = "0.1.0"
