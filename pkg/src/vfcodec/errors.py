"""Exception hierarchy shared across the package."""


class VfcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VfcError):
    """Tensor shapes incompatible with the requested operation."""


class NumericsError(VfcError):
    """Non-finite values where finite values are required."""


class ConfigError(VfcError):
    """Invalid configuration or mismatched artifact provenance."""


class CoderError(VfcError):
    """Range coder misuse or a corrupt/truncated entropy-coded stream."""


class BitstreamError(VfcError):
    """Malformed bitstream or checkpoint container."""


class StateError(VfcError):
    """Codec or training state used out of order (e.g. P-frame without reference)."""
