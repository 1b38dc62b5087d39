class ConfigError(ValueError):
    """Invalid or incompatible run configuration."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class InvariantViolation(AssertionError):
    """A runtime invariant check failed during a run."""


class NoStableConfiguration(RuntimeError):
    """Every configuration of a sweep diverged."""
