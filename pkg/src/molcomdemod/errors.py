"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class CoverageError(ConfigError):
    """A query time falls outside the domain of a tabulated signal."""


class NumericalFault(RuntimeError):
    """A simulation or filter produced a non-finite or inconsistent value."""


class ModelInconsistencyError(NumericalFault):
    """An observed event has zero probability under the filtering model."""


class BudgetExceeded(RuntimeError):
    """Estimated runtime exceeds the configured budget."""
