"""
Exception hierarchy for the RLO phase-correction toolkit.

Every error carries a human-readable ``detail`` and an ``exit_code`` that the
command-line entry point returns to the shell.
"""

from typing import Optional


class PhaseNetError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


# Configuration (exit 2)

class ConfigurationError(PhaseNetError):
    exit_code = 2


class StratificationError(ConfigurationError):
    def __init__(self, detail: str, minimum_layers: Optional[int] = None):
        super().__init__(detail)
        self.minimum_layers = minimum_layers


class PropagationError(ConfigurationError):
    pass


class SplitError(ConfigurationError, ValueError):
    pass


# Dataset I/O (exit 3)

class DatasetError(PhaseNetError):
    exit_code = 3


class DatasetIOError(DatasetError):
    pass


class CorruptionError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


class SampleLookupError(DatasetError, LookupError):
    pass


# Model / data mismatch (exit 4)

class SpecError(PhaseNetError):
    exit_code = 4


class CheckpointError(PhaseNetError):
    exit_code = 4


class ShapeError(PhaseNetError, ValueError):
    exit_code = 4


class ModelMismatchError(PhaseNetError):
    exit_code = 4


# Numerical domain (exit 5)

class DomainError(PhaseNetError, ValueError):
    exit_code = 5


class NumericalError(PhaseNetError, ArithmeticError):
    exit_code = 5

    def __init__(self, detail: str, layer_index: Optional[int] = None):
        super().__init__(detail)
        self.layer_index = layer_index


class UndefinedEfficiencyError(DomainError):
    pass


class UnphysicalStateError(DomainError):
    pass


class ScanRangeError(DomainError):
    pass


class TrainingDivergedError(NumericalError):
    pass


# Plotting (exit 6)

class PlotInputError(PhaseNetError):
    exit_code = 6
