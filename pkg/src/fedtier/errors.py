"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid dimensions, ranks, budgets, or other caller-supplied settings."""


class PreconditionError(ValueError):
    """An operation's input contract was violated (e.g. a non-orthonormal basis)."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate where a direction or scale is required."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""
