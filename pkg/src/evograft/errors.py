"""Exception hierarchy shared by all evograft modules.

The CLI maps these onto its exit-code contract:
    ConfigError -> 2, DataError -> 3, CorruptionError/InvariantError -> 4.
"""


class EvograftError(Exception):
    """Base class for all evograft errors."""


class ConfigError(EvograftError):
    """Invalid configuration or usage (bad field, unknown task, empty candidate set)."""


class DataError(EvograftError):
    """Malformed external data: dataset files, checkpoints, headers, checksums."""


class ValidationError(EvograftError):
    """A value violates a domain contract (non-finite params, bad shapes, bad labels)."""


class CorruptionError(EvograftError):
    """Content-addressed storage inconsistency: same id, different bytes."""


class InvariantError(EvograftError):
    """An internal invariant that should be unrepresentable was violated."""


class StructuralError(EvograftError):
    """Layer sequence or tensor shapes do not compose into a valid model."""


class AclError(EvograftError):
    """A knowledge-access policy would be violated by the attempted reuse."""
