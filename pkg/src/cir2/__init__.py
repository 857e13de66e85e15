"""Two-stage composed image retrieval: candidate filtering + re-ranking."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import (Cir2Error, ConfigError, ContractError, DimensionError,
                     GenerationError, ParseError, ProvenanceError)

__all__ = [
    "__version__",
    "Cir2Error", "ConfigError", "ContractError", "DimensionError",
    "GenerationError", "ParseError", "ProvenanceError",
]
