"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PipelineError):
    """An operation received data violating its preconditions."""


class InvalidConfigError(PipelineError):
    """Configuration is structurally or semantically invalid."""


class CodecError(PipelineError):
    """A file or string could not be decoded/encoded."""


class LabelRangeError(CodecError):
    """A mask value is outside {0..K-1} and is not the ignore value."""


class DegenerateBatchError(PipelineError):
    """A training batch contains no valid (non-ignore) pixels."""


class NonFiniteGradientError(PipelineError):
    """Gradients contain NaN or infinity; the optimizer refuses to step."""


class UndefinedMetricError(PipelineError):
    """No class has a nonzero union; mIoU is undefined."""
