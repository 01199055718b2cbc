"""
Exception hierarchy and CLI exit codes.
"""

from typing import Optional


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_INTERNAL = 4


class BinflowError(Exception):
    """Base class for all library errors"""


class DimensionError(BinflowError, ValueError):
    """Operand shapes are incompatible"""


class DomainError(BinflowError, ValueError):
    """Argument lies outside the mathematical domain of an operation"""


class ContractError(BinflowError, RuntimeError):
    """API used against its preconditions"""


class ConfigError(BinflowError, ValueError):
    """Inconsistent configuration"""


class DivergenceError(BinflowError, ArithmeticError):
    """A singular or non-finite quantity was produced"""


class NonFiniteGradientError(DivergenceError):
    """Optimizer received a non-finite gradient"""

    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite gradient at step {step} in parameter '{name}'")
        self.step = step
        self.name = name


class NonFiniteParameterError(DivergenceError):
    """A trainable parameter left the finite range"""

    def __init__(self, name: str, step: Optional[int] = None):
        where = f" after step {step}" if step is not None else ""
        super().__init__(f"non-finite entries in parameter '{name}'{where}")
        self.name = name
        self.step = step


class IntegrationDivergenceError(DivergenceError):
    """Euler state became non-finite"""

    def __init__(self, step: int):
        super().__init__(f"non-finite sampler state at Euler step {step}")
        self.step = step


class FormatError(BinflowError, ValueError):
    """Malformed binary input"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MissingInputError(BinflowError, FileNotFoundError):
    """Required input file is absent"""

    def __init__(self, path: str, hint: str):
        super().__init__(f"missing input file: {path}. {hint}")
        self.path = path
        self.hint = hint
