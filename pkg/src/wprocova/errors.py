"""Exception hierarchy shared across the package.

Every recoverable, domain-specific failure raises a subclass of
:class:`WprocovaError`, so callers (in particular the CLI) can distinguish
bad inputs from genuine bugs.
"""


class WprocovaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(WprocovaError):
    """Array arguments have incompatible shapes or lengths."""


class RankDeficient(WprocovaError):
    """Design matrix is numerically rank deficient; coefficients unidentifiable."""


class NonPositiveVariance(WprocovaError):
    """A supplied variance is zero, negative, or non-finite."""


class DegenerateTwinVariance(WprocovaError):
    """Log twin variances are (numerically) constant; slope unidentifiable."""


class EmptyInput(WprocovaError):
    """Too few observations for the requested fit."""


class SingleArm(WprocovaError):
    """A treatment arm has fewer than two participants."""


class MixedData(WprocovaError):
    """Analysis results being compared do not come from the same dataset."""


class InvalidPower(WprocovaError):
    """Power-calculation arguments outside their valid range."""


class NonPSDCovariance(WprocovaError):
    """Covariance matrix has eigenvalues too negative to clip."""


class SingularBread(WprocovaError):
    """Outer-product moment matrix is not invertible."""


class InvalidScenarioParams(WprocovaError):
    """Simulation scenario constraints violated by the configuration."""


class ConstantFactor(WprocovaError):
    """Requested factor takes a single value across simulation cells."""


class Unattainable(WprocovaError):
    """Sample-size search could not bracket the target power."""


class MissingColumn(WprocovaError):
    """Required CSV column absent from the header."""


class ColumnConflict(WprocovaError):
    """Mutually exclusive CSV columns both present."""


class NonPositiveTwinVariance(WprocovaError):
    """Twin variance column contains a non-positive value."""


class MalformedNumber(WprocovaError):
    """CSV cell could not be parsed as the expected numeric type."""


class ConfigError(WprocovaError):
    """Simulation grid configuration violates the expected schema."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")
