"""Exception taxonomy shared across the package."""


class FedSplitError(Exception):
    """Base class for all package errors."""


class ShapeError(FedSplitError, ValueError):
    """Matrix or layer dimensions do not line up."""


class StateError(FedSplitError, RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class NumericError(FedSplitError, ArithmeticError):
    """NaN or Inf where a finite value is required."""


class ValidationError(FedSplitError, ValueError):
    """Input violates a declared precondition."""


class SchemaError(FedSplitError, ValueError):
    """CSV column set or schema file does not match the declared schema."""


class AlignmentError(FedSplitError, ValueError):
    """Per-party row counts disagree within a segment."""


class DataError(FedSplitError, ValueError):
    """A row-level data problem (missing soft label, bad label value)."""


class MetricUndefinedError(FedSplitError, ValueError):
    """Metric has no defined value for this input (e.g. single-class AUC)."""


class ProtocolError(FedSplitError, RuntimeError):
    """Malformed, unexpected, or out-of-order message."""


class HandshakeError(ProtocolError):
    """Version or configuration mismatch during the hello exchange."""


class TransportError(FedSplitError, RuntimeError):
    """The underlying channel failed."""


class TransportTimeout(TransportError):
    """recv() exceeded its deadline."""
