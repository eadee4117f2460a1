"""Error taxonomy shared across the package.

ValidationError covers malformed inputs, configs, and datasets (CLI exit 2);
NumericalError covers non-convergence and degenerate numerics (CLI exit 3).
"""


class ValidationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class DatasetHeaderError(ValidationError):
    """The dataset header line is missing, unparsable, or inconsistent."""


class DatasetRecordError(ValidationError):
    """A record line has the wrong field count or an unparsable number."""


class DatasetQuaternionError(ValidationError):
    """A record carries a rotation that is not a unit quaternion."""
