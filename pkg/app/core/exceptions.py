"""Exception hierarchy shared by the numerical services, the CLI and the API."""


class LabError(Exception):
    """Base class for every error raised by the lab."""

    exit_code = 3


class ConfigError(LabError):
    """Invalid or unparseable experiment configuration."""

    exit_code = 2


class MissingCouplingError(ConfigError):
    """An edge of the topology has no coupling value."""


class InfeasibleCorrelationError(ConfigError):
    """The requested transmitter correlation cannot be realized for the marginal."""


class DegenerateFrequencyError(LabError):
    """A joint-frequency cell needed by the coupling estimator is empty."""


class InsufficientSamplesError(LabError):
    """Not enough samples to estimate a statistic."""

    def __init__(self, message: str, label: int | None = None):
        super().__init__(message)
        self.label = label


class DivergenceError(LabError):
    """A series or iteration does not converge (spectral radius >= 1)."""


class DimensionMismatchError(LabError):
    """Operands have incompatible shapes."""


class ZeroDeflectionError(LabError):
    """The mean-difference vector is zero, so no direction carries signal."""


class NonPositiveVarianceError(LabError):
    """A variance that must be strictly positive is not."""


class EnumerationLimitError(LabError):
    """Exact state enumeration requested for too many nodes."""


class ReferencePowerError(LabError):
    """A calibration reference power is not positive where an SNR is finite."""


class OutputError(LabError):
    """A result file cannot be written or read back."""
