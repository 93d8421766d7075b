"""Exception types raised across the package."""


class SamCoevoError(Exception):
    """Base class for all package errors."""


class ArityMismatch(SamCoevoError):
    pass


class KindMismatch(SamCoevoError):
    pass


class InvalidGenome(SamCoevoError):
    pass


class CyclicGenome(InvalidGenome):
    pass


class GenomeFormatError(SamCoevoError):
    pass


class NonFiniteFitness(SamCoevoError):
    pass


class EmptyMorphology(SamCoevoError):
    """No voxel survives decoding/pruning; evaluators map this to fitness 0."""


class NumericalDivergence(SamCoevoError):
    """A simulated coordinate became non-finite."""


class NTooLarge(SamCoevoError):
    pass


class ConstantSample(SamCoevoError):
    pass


class SampleTooSmall(SamCoevoError):
    pass


class DegenerateGroups(SamCoevoError):
    pass


class AllZeroDifferences(SamCoevoError):
    pass


class ZeroVariance(SamCoevoError):
    pass


class WorkerUnreachable(SamCoevoError):
    pass


class BindFailure(SamCoevoError):
    pass


class MalformedRecord(SamCoevoError):
    pass


class ConfigError(SamCoevoError):
    pass
