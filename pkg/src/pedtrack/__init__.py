"""Self-hosted capture, registration, analysis, and tracking of
time-series appendage scans from consumer flatbed scanners."""

from .errors import PedtrackError
from .transform import SimilarityTransform

__version__ = "0.1.0"

__all__ = ["PedtrackError", "SimilarityTransform", "__version__"]
