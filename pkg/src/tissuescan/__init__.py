"""Simulated tissue tracking and position-based visual servoing for probe scanning."""

from tissuescan.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
