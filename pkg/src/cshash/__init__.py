"""Binary hash-code toolkit: orthogonal hash centers, dynamic sign encoding,
margin losses with analytic gradients, and bit-packed Hamming retrieval."""

__version__ = "0.1.0"

from cshash.errors import FormatError, ResamplingError, TrainingDiverged, ValidationError

__all__ = [
    "FormatError",
    "ResamplingError",
    "TrainingDiverged",
    "ValidationError",
    "__version__",
]
