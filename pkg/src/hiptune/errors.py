"""Exception hierarchy.

``ConfigError`` and ``ValidationError`` map to CLI exit code 2; everything
else deriving from ``HiPTuneError`` maps to exit code 1.
"""


class HiPTuneError(Exception):
    pass


class ConfigError(HiPTuneError, ValueError):
    pass


class ValidationError(HiPTuneError, ValueError):
    pass


class ManifestError(ValidationError):
    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class LabelError(ValidationError):
    pass


class ShapeError(HiPTuneError, ValueError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class NumericalDomainError(HiPTuneError, ArithmeticError):
    pass


class InvariantViolation(HiPTuneError, RuntimeError):
    pass


class ContractError(HiPTuneError, RuntimeError):
    pass


class MetricError(HiPTuneError, ValueError):
    pass


class ProtocolError(ValidationError):
    pass
