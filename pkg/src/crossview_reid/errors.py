"""Exception types shared across the package.

Built-in exceptions (IndexError, KeyError, FileExistsError, ...) are used
where they already say the right thing; these classes cover the
package-specific failure modes that the CLI maps to exit codes.
"""


class ValidationError(ValueError):
    """An input tensor or record violates a documented precondition."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but degenerate (e.g. zero vector)."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid or unknown."""


class PreconditionError(RuntimeError):
    """An operation was invoked before its prerequisites were met."""


class ProtocolError(RuntimeError):
    """An evaluation protocol constraint cannot be satisfied."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss or gradients)."""


class BudgetError(RuntimeError):
    """Model construction exceeded the adapter parameter budget."""
