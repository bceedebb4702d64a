class ConfigError(ValueError):
    """Invalid run or generator configuration (CLI exit code 2)."""


class LoadError(RuntimeError):
    """A dataset directory is missing or inconsistent."""


class ContractViolation(RuntimeError):
    """A training step received a batch that breaks its preconditions."""


class DivergenceError(RuntimeError):
    """A loss went non-finite; the message names the step."""
