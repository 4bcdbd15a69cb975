"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for problems with the
user's data or arguments, 3 for numerical failures.
"""


class ZeeError(Exception):
    exit_code = 4


class DataError(ZeeError):
    exit_code = 2


class MissingColumn(DataError):
    pass


class NonBinaryIndicator(DataError):
    pass


class ProbabilityOutOfRange(DataError):
    pass


class NoSubjectAtRiskAtTau(DataError):
    pass


class InvalidRecord(DataError):
    pass


class SchemeDataMismatch(DataError):
    pass


class DomainError(DataError):
    pass


class ConfigError(DataError):
    pass


class NumericalError(ZeeError):
    exit_code = 3


class ZeroRiskSet(NumericalError):
    pass


class SingularA(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class SingularAuxiliary(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class UnboundedDual(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
