"""Exceptions raised by beeplan.

Everything derives from `BeeplanError`, so the command line can report any
domain failure uniformly.
"""


class BeeplanError(Exception):
    """Base class for all domain errors."""


# Cluster descriptions.


class ParseError(BeeplanError):
    """The document is not syntactically valid."""


class ValidationError(BeeplanError):
    """The document parsed but violates an invariant. The message names
    the offending field."""


# Planning.


class InfeasiblePlan(BeeplanError):
    """A plan does not fit the cluster it is evaluated on."""


class NoFeasiblePlan(BeeplanError):
    """No layer assignment fits in memory."""


class TooLarge(BeeplanError):
    """An exhaustive search would enumerate too many candidates."""


# Codec.


class OddLength(BeeplanError):
    """An FP16 stream must have an even number of bytes."""


class LaneLengthMismatch(BeeplanError):
    """The high and low lanes have different lengths."""


class BackendUnknown(BeeplanError):
    """No lossless backend is registered under that name or id."""


class CorruptContainer(BeeplanError):
    """A compressed container failed validation."""


# Speculative decoding runtime.


class BadDistribution(BeeplanError):
    """A probability vector does not sum to one."""


class ShapeMismatch(BeeplanError):
    """Arrays have incompatible shapes."""


class DimMismatch(BeeplanError):
    """Hidden vectors disagree on their dimension."""


class NotFp16(BeeplanError):
    """Hidden vectors hold values that FP16 cannot represent exactly."""


class CorruptOffsets(BeeplanError):
    """A packed batch's offsets do not describe its payload."""


class IndexOutOfRegion(BeeplanError):
    """A KV-cache index falls outside the region it must belong to."""


# Wire.


class FrameCorrupt(BeeplanError):
    """A wire frame failed validation."""


class ConnectionLost(BeeplanError):
    """A peer closed its connection mid-run."""
