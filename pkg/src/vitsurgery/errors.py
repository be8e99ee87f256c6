"""Exception taxonomy.

Everything user-facing derives from VitSurgeryError so the CLI can map
domain errors to exit code 1 and genuine runtime failures (I/O, bugs)
to exit code 2.
"""


class VitSurgeryError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VitSurgeryError):
    """Tensor extents are invalid or incompatible for an operation."""


class PrecisionError(VitSurgeryError):
    """float32 and float64 tensors were mixed in one graph."""


class ConfigError(VitSurgeryError):
    """A model configuration violates its invariants."""


class SpecError(VitSurgeryError):
    """An expansion or adapter spec violates its invariants."""


class UsageError(VitSurgeryError):
    """An API contract was violated (wrong call order, bad combination)."""


class InputError(VitSurgeryError):
    """A value argument is out of its documented range."""


class FormatError(VitSurgeryError):
    """A serialized file does not conform to its binary layout."""


class VersionError(FormatError):
    """A serialized file declares an unsupported format version."""
