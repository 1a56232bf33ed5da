"""Exception hierarchy shared by every module."""


class RegistrationError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RegistrationError, ValueError):
    """Grid extents or shapes are inconsistent."""


class FormatError(RegistrationError, ValueError):
    """A file header or sidecar could not be parsed."""


class DataError(RegistrationError, ValueError):
    """File payload holds invalid values (NaN, Inf, wrong type)."""


class DegenerateInputError(RegistrationError, ValueError):
    """A statistic is undefined for the given input (e.g. constant image)."""


class ParameterError(RegistrationError, ValueError):
    """A configuration value is outside its valid range."""


class DivergenceError(RegistrationError, ArithmeticError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, stage, iteration, value):
        self.stage = stage
        self.iteration = iteration
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at stage {stage}, iteration {iteration}")
