"""Exception types shared across the pipeline."""


class PetSignalError(Exception):
    """Base class for all library errors."""


class InvalidInputError(PetSignalError, ValueError):
    """An argument violates a documented precondition."""


class SchemaError(PetSignalError, ValueError):
    """Input table or document is structurally wrong (missing columns, gaps, overlaps)."""


class PlanParseError(SchemaError):
    """A signal plan contains an unknown label or unparsable value."""


class OutOfRangeError(PetSignalError, ValueError):
    """A query falls outside the covered domain."""


class OracleSizeError(PetSignalError, ValueError):
    """Input too large for a brute-force reference computation."""


class ScriptError(PetSignalError, ValueError):
    """A scenario script is malformed."""


class ConfigError(PetSignalError, ValueError):
    """A run configuration or model file is missing keys or malformed."""
