"""GPSVI CTR lab: a numpy autodiff engine, attention CTR baselines, and a group-prior
variational layer with a volume-preserving flow, plus synthetic long-tail data and evaluation."""

from .errors import GPSVIError

__version__ = "0.1.0"

__all__ = ["GPSVIError", "__version__"]
