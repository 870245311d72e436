"""Exception taxonomy shared by all modules.

ValidationError and its subclasses map to CLI exit code 2,
NumericalError to exit code 3.
"""


class ValidationError(ValueError):
    """Bad configuration, bad argument values, or violated preconditions."""


class ShapeError(ValidationError):
    """Tensor or image dimensions are inconsistent."""


class VocabularyError(ValidationError):
    """Token or word not present in the closed vocabulary."""


class EnumerationError(ValidationError):
    """Unsupported kind name (texture kind, defect kind, ...)."""


class PairingContractError(ValidationError):
    """Reference and target name different anomaly types."""


class ContractError(ValidationError):
    """An operation was called outside its declared contract."""


class ProtocolError(ValidationError):
    """Evaluation protocol misuse, e.g. overlapping train/test splits."""


class MetricUndefinedError(ValidationError):
    """A metric has no defined value for the given inputs."""


class DivisionGuardError(ValidationError):
    """A ratio's denominator is zero."""


class FrozenParameterError(AssertionError):
    """A parameter that must stay frozen was modified."""


class NumericalError(RuntimeError):
    """Non-finite values or other numerical failures."""
