"""Exception types shared across the toolkit.

Every data-dependent failure raises one of these named errors; the CLI maps
them to exit code 2. Programming errors (wrong argument types etc.) raise
the usual built-ins.
"""


class DwiRatioError(Exception):
    """Base class for all toolkit errors."""


# --- tensor fitting ---------------------------------------------------------

class RankDeficientScheme(DwiRatioError):
    """Gradient scheme cannot determine all 6 tensor components."""


class NonPositiveS0(DwiRatioError):
    """Reference b=0 intensity must be strictly positive."""


class LengthMismatch(DwiRatioError):
    """Signal vector length does not match the gradient scheme."""


class NonPositiveInput(DwiRatioError):
    """Operation requires strictly positive inputs."""


# --- losses -----------------------------------------------------------------

class DimMismatch(DwiRatioError):
    """Input grids must share dimensions."""


# --- phantom / dataset ------------------------------------------------------

class InvalidSpec(DwiRatioError):
    """Phantom specification violates its invariants."""


class NonDivisibleDim(DwiRatioError):
    """Array dimension not divisible by the downsampling factor."""


class DegenerateB0(DwiRatioError):
    """b=0 reference has no usable intensity for normalization."""


class InvalidSplit(DwiRatioError):
    """Dataset split fractions must sum to 1."""


# --- training ---------------------------------------------------------------

class EmptyDataset(DwiRatioError):
    """Training or validation set is empty."""


class ShapeMismatch(DwiRatioError):
    """Parameter and gradient shapes disagree."""


class StaleCache(DwiRatioError):
    """Backward pass called with a cache from a different forward call."""


# --- file formats -----------------------------------------------------------

class IoFailure(DwiRatioError):
    """File could not be read, written, or parsed."""


class BadMagic(DwiRatioError):
    """File is not a NIfTI-1 file this subset understands."""


class UnsupportedDatatype(DwiRatioError):
    """NIfTI datatype outside the float32 subset."""


class TruncatedPayload(DwiRatioError):
    """NIfTI payload shorter than the header dims imply."""


class ColumnCountMismatch(DwiRatioError):
    """bval/bvec files disagree on the number of entries."""


class NonUnitDirection(DwiRatioError):
    """Gradient direction too far from unit length to auto-normalize."""


class ConfigError(DwiRatioError):
    """Run configuration is malformed (unknown key, bad value)."""
