"""Exception hierarchy shared by every module of the package."""


class ContractError(ValueError):
    """An input violates the documented precondition of an operation."""


class ShapeError(ContractError):
    """Operand shapes do not conform for the requested kernel."""


class DomainError(ContractError):
    """A value lies outside the mathematical domain of an operation."""


class ConfigError(ContractError):
    """Invalid hyperparameter or configuration value."""


class AlignmentError(ContractError):
    """Frame counts of paired views or streams disagree."""


class InfeasibleAlignmentError(ContractError):
    """A label sequence cannot be aligned to the available frames."""


class SizeGuardError(ContractError):
    """An instance is too large for an exhaustive oracle."""


class TapeStateError(RuntimeError):
    """The computation tape was already consumed by a previous backward pass."""


class GradientCheckError(AssertionError):
    """Raised by grad_check when a finite-difference probe is unusable or out of tolerance."""


class DatasetParseError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, lineno, reason):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno


class IncompatibleVocabError(ValueError):
    """A dataset file was written under a different phoneme vocabulary."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, records=()):
        super().__init__(message)
        self.records = list(records)


class SigmaCollapseError(RuntimeError):
    """A learned uncertainty scale collapsed towards zero."""
