"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems -> 2, data problems -> 3,
numerical failures -> 4.
"""


class DeepDensError(Exception):
    """Base class for package errors."""


# --- numerical failures ---------------------------------------------------

class NotPositiveDefinite(DeepDensError):
    """Cholesky factorization failed even at the maximum jitter level."""


class SingularTriangular(DeepDensError):
    """Triangular solve requested with a non-positive diagonal entry."""


class NonPositiveVariance(DeepDensError):
    """A variance parameter that must be > 0 is not."""


class NonPositiveNoise(DeepDensError):
    """Likelihood noise variance must be > 0."""


class NonFiniteGradient(DeepDensError):
    """A gradient entry came back NaN or Inf."""

    def __init__(self, group: str):
        self.group = group
        super().__init__(f"non-finite gradient in parameter group '{group}'")


class StepRejected(DeepDensError):
    """Natural-gradient step left the PD cone even after halving."""


# --- evaluation -----------------------------------------------------------

class ConstantSample(DeepDensError):
    """Sample is constant; the requested statistic is undefined."""


class SizeOutOfRange(DeepDensError):
    """Sample size outside the supported range."""


class DegenerateSamples(DeepDensError):
    """Predictive samples have zero spread; KDE bandwidth undefined."""


# --- construction / parsing ------------------------------------------------

class DimensionMismatch(DeepDensError):
    """Array shapes do not conform."""


class ParseError(DeepDensError):
    """A model-spec string failed to parse."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        super().__init__(message)


class EmptySpec(ParseError):
    """Model-spec string contains no layers."""


class NoFinalGp(ParseError):
    """Model-spec string does not end in a GP layer."""


class ConfigError(DeepDensError):
    """Bad run configuration (unknown key, unparsable value, ...)."""


# --- data ingestion ---------------------------------------------------------

class MalformedRow(DeepDensError):
    """CSV row with a non-numeric cell."""

    def __init__(self, line: int, detail: str = ""):
        self.line = line
        msg = f"malformed row at line {line}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class MissingTarget(DeepDensError):
    """Requested target column absent from the CSV header."""


class CheckpointError(DeepDensError):
    """Checkpoint unreadable or version-incompatible."""
