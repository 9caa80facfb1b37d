"""Exception hierarchy shared by every module in the package.

Each failure mode gets its own class so callers (and tests) can catch
precisely what they expect instead of pattern-matching on messages.
"""


class LifereidError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(LifereidError, ValueError):
    """Tensor or array shapes are incompatible with the requested operation."""


class LabelError(LifereidError, ValueError):
    """Identity/target encoding is malformed (e.g. a row that is not one-hot)."""


class DegenerateInputError(LifereidError, ValueError):
    """Input is structurally valid but mathematically unusable (zero vector, ...)."""


class GraphStateError(LifereidError, RuntimeError):
    """Autodiff graph used out of order (e.g. backward called twice)."""


class NumericError(LifereidError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class ConfigError(LifereidError, ValueError):
    """Configuration file or option set is invalid."""


class FormatError(LifereidError, ValueError):
    """Serialized bytes do not parse as the expected on-disk format."""


class ProtocolError(LifereidError, RuntimeError):
    """An operation violates the append-only/backfill-free storage discipline."""


class IntegrityError(LifereidError, RuntimeError):
    """Stored content does not match its recorded checksum."""


class BatchCompositionError(LifereidError, ValueError):
    """A training batch does not satisfy the identity/instance layout it promises."""


class BankIntegrityError(LifereidError, ValueError):
    """Replay bank contents are inconsistent (shapes, norms, or labels)."""
