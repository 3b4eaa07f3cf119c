"""Exception hierarchy shared across the package."""


class ChainOptError(Exception):
    """Base class for all package-specific errors."""


class InvalidStructureError(ChainOptError):
    """Malformed problem data: bad shapes, invalid distributions, mismatched sizes."""


class CapabilityError(ChainOptError):
    """An operation was requested from a model that does not support it."""


class ReachabilityError(ChainOptError):
    """A first-exit problem whose terminal set is not reached with probability 1."""


class ErgodicityError(ChainOptError):
    """An average-cost problem whose chain is reducible or periodic."""


class DivergenceUndefinedError(ChainOptError):
    """A KL divergence query where the reference distribution lacks support."""


class StalenessError(ChainOptError):
    """An estimator was handed rollouts generated under different parameters."""


class RegularizationRequiredError(ChainOptError):
    """A least-squares fit is rank deficient and no ridge term was supplied."""


class ProbeError(ChainOptError):
    """A finite-difference probe produced a non-finite objective value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class SpectralError(ChainOptError):
    """An eigenvalue iteration failed to converge."""


class ConfigError(ChainOptError):
    """An experiment configuration failed validation."""
