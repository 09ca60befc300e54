"""
Exception hierarchy for ddlab.

Every failure a ddlab operation can report derives from DDLabError. The two
intermediate bases decide the CLI exit code.
"""


class DDLabError(Exception):
    """Base class for all ddlab errors."""
    pass


class ConfigError(DDLabError):
    """Configuration could not be validated (CLI exit code 2)."""
    pass


class ArtifactError(DDLabError):
    """A required artifact is missing or unreadable (CLI exit code 3)."""
    pass


# core numerics
class NonPsdInput(DDLabError):
    pass


class TooFewPoints(DDLabError):
    pass


class ShapeMismatch(DDLabError):
    pass


# toy data / metrics
class UnsupportedKind(DDLabError):
    pass


class LengthMismatch(DDLabError):
    pass


# neural denoiser
class ConditionOutOfRange(DDLabError):
    pass


class EmptyBatch(DDLabError):
    pass


# diffusion engine
class IndexOutOfRange(DDLabError):
    pass


class InvalidStepOrder(DDLabError):
    pass


class UnconditionalModel(DDLabError):
    pass


class GridTooShort(DDLabError):
    pass


# distillation
class NonDivisibleGrid(DDLabError):
    pass


# experiment driver
class ConfigInvalid(ConfigError):
    pass


class MissingCheckpoint(ArtifactError):
    pass


class EmptyRunDir(ArtifactError):
    pass


class CheckpointFormatError(ArtifactError):
    pass
