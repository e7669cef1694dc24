"""Exception taxonomy.

Two families matter to the CLI exit-code mapping: DataError (bad files,
mismatched geometry, unknown labels -> exit 3) and NumericalError (degenerate
or out-of-domain math -> exit 4). Library code raises the specific subclasses.
"""


class LongregError(Exception):
    """Base class for all errors raised by this package."""


class DataError(LongregError):
    """Malformed or inconsistent input data."""


class NumericalError(LongregError):
    """Numerically degenerate or out-of-domain computation."""


class AngleNearPi(NumericalError):
    """Rotation angle within 1e-6 of pi: the matrix log is not unique there."""


class DegenerateGeometry(NumericalError):
    """Point geometry too thin to determine a rotation (rank < 2)."""


class ZeroWeight(NumericalError):
    """Total point weight below threshold; the fit is undefined."""


class DivergedStep(NumericalError):
    """Line search underflowed before completing the first iteration."""


class GeometryMismatch(DataError):
    """Operands live on different grids or have incompatible shapes."""


class UnknownClass(DataError):
    """A class id outside the label map's declared label set."""


class AllChannelsEmpty(DataError):
    """Every feature channel has (near-)zero total activation."""


class NegativeActivation(DataError):
    """Feature maps must be non-negative."""


class FileFormatError(DataError):
    """Unparseable or unsupported on-disk format."""
