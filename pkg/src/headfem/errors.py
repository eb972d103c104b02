"""Exception hierarchy shared by all headfem modules.

Two branches matter to callers: :class:`SetupError` covers bad input files,
bad configuration and malformed definitions (the CLI maps these to exit
code 2), while :class:`ComputationError` covers numerical and runtime
failures (exit code 3).
"""


class HeadfemError(Exception):
    """Base class for all headfem exceptions."""


class SetupError(HeadfemError):
    """Invalid input data, files or configuration."""


class ComputationError(HeadfemError):
    """A numerical operation failed or produced an invalid result."""


# --- geometry ---

class FormatError(SetupError):
    """A mesh or data file could not be parsed."""


class TopologyError(SetupError):
    """A surface mesh is not closed / consistently oriented."""


# --- mesh generation ---

class EmptyMeshError(ComputationError):
    """Mesh generation produced no labeled elements."""


class ParameterError(SetupError):
    """A numeric parameter is outside its admissible range."""


class ConfigError(SetupError):
    """Project configuration is missing, inconsistent or unknown."""


# --- FEM assembly ---

class AssemblyError(ComputationError):
    """System assembly produced an invalid (non-SPD) operator."""


class ElectrodeError(SetupError):
    """An electrode definition covers no boundary area."""


class LocationError(SetupError):
    """A point could not be located inside the mesh / source region."""


# --- solvers ---

class SingularPreconditionerError(ComputationError):
    """The lumped diagonal preconditioner has a zero entry."""


class ConvergenceError(ComputationError):
    """Iterative solve did not reach the requested tolerance.

    Carries the best iterate seen so far in ``best_x`` together with its
    ``residual`` and the number of ``iterations`` performed.  When raised
    from a multi-column solve, ``column`` identifies the failing column.
    """

    def __init__(self, message, best_x=None, residual=None, iterations=None,
                 column=None):
        super().__init__(message)
        self.best_x = best_x
        self.residual = residual
        self.iterations = iterations
        self.column = column


class SingularSystemError(ComputationError):
    """A dense electrode-level system is singular."""


# --- lead fields ---

class CurrentPatternError(SetupError):
    """Injected currents do not sum to zero."""


class DofError(SetupError):
    """A conductivity DOF has an empty element support."""


# --- inversion ---

class NumericalError(ComputationError):
    """A dense solve inside the inversion failed."""


class RoiError(ComputationError):
    """A region of interest contains no degrees of freedom."""


class DecompositionError(ComputationError):
    """A randomized decomposition produced an empty subset."""


class UndefinedMetricError(ComputationError):
    """Reconstruction metrics are undefined (all-zero amplitudes)."""


# --- simulation ---

class EmptyAnomalyError(SetupError):
    """A conductivity anomaly intersects no mesh element."""


# --- harness ---

class DataError(SetupError):
    """Measurement data are inconsistent with the lead field."""
