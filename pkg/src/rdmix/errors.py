"""Exception hierarchy shared by all modules."""


class RdmError(Exception):
    """Base class for library errors."""


class NumericInputError(RdmError, ValueError):
    pass


class CutLocusError(RdmError, ValueError):
    """Log map requested for a pair on the cut locus (e.g. antipodal points)."""


class UnsupportedPriorError(RdmError, ValueError):
    pass


class HorizonError(RdmError, ValueError):
    """Bridge drift evaluated inside the clipped terminal window."""


class RangeError(RdmError, ValueError):
    pass


class MeshQualityError(RdmError, ValueError):
    pass


class SolverError(RdmError, RuntimeError):
    pass


class DegenerateDirectionError(RdmError, ValueError):
    pass


class BoundaryHit(RdmError, RuntimeError):
    pass


class ModelStateError(RdmError, RuntimeError):
    pass


class UsageError(RdmError, RuntimeError):
    pass


class ConfigError(RdmError, ValueError):
    pass


class SimulationError(RdmError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IntegrationError(RdmError, RuntimeError):
    pass


class LikelihoodError(RdmError, RuntimeError):
    pass


class EstimatorError(RdmError, ValueError):
    pass


class DataFormatError(RdmError, ValueError):
    pass


class TrainingAborted(RdmError, RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
