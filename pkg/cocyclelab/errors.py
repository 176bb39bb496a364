"""
Exceptions raised by the cocycle lab
"""


class LabError(Exception):
    """Base class for every error the lab raises on purpose"""


class InvalidInputError(LabError, ValueError):
    """Input violates a documented precondition (non-finite entries, det != 1, bad index)"""


class DegenerateSampleError(LabError):
    """A sampled path produced degenerate geometry (rank drop, dimension mismatch)"""


class ConvergenceError(LabError):
    """An estimating sequence failed to settle; carries the offending residual"""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class NotStationaryError(LabError):
    """A sample cloud failed its stationarity diagnostic"""


class ConfigError(LabError):
    """A scenario configuration failed validation"""


class ExperimentError(LabError):
    """An experiment could not produce its result"""
