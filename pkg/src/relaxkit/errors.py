"""Exception hierarchy shared across the toolkit."""


class RelaxkitError(Exception):
    """Base class for all errors raised by this package."""


class InvariantError(RelaxkitError, ValueError):
    """A domain object violates one of its declared invariants."""


class ContainerFormatError(RelaxkitError):
    """On-disk container is malformed or inconsistent with its metadata."""


class VersionMismatchError(ContainerFormatError):
    """Container or weights file was written with an unsupported format version."""


class CompatibilityError(RelaxkitError):
    """Inputs are individually valid but cannot be combined (e.g. wrong N for a model)."""


class ConfigError(RelaxkitError, ValueError):
    """A run configuration failed schema validation."""


class NumericsError(RelaxkitError, FloatingPointError):
    """Non-finite values were produced where finite values are required."""


class TrainingDivergedError(RelaxkitError):
    """Training loss exploded and stayed high; the run was aborted."""
