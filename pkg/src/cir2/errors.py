"""Error taxonomy shared across the package.

Every failure surfaced to callers is one of these types so the command line
layer can map them onto stable exit codes.
"""
from __future__ import annotations


class Cir2Error(Exception):
    """Base class for all package errors."""


class ConfigError(Cir2Error):
    """A run configuration is malformed or internally inconsistent."""


class DimensionError(Cir2Error):
    """Array shapes disagree with an operation's contract."""


class ContractError(Cir2Error):
    """A documented precondition or invariant was violated at runtime."""


class ParseError(Cir2Error):
    """A serialized artifact could not be decoded."""


class GenerationError(Cir2Error):
    """The synthetic data sampler could not satisfy its constraints."""


class ProvenanceError(Cir2Error):
    """Artifacts from different upstream runs were mixed together."""
