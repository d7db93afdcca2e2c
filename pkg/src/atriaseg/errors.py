"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/format integrity problems with 3, and runtime/training failures with 4.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PipelineError):
    """Invalid configuration, parameters, or preconditions set by the caller."""


class FormatError(PipelineError):
    """A file does not conform to its on-disk format."""


class IntegrityError(PipelineError):
    """Data is structurally valid but violates an invariant."""


class ShapeError(IntegrityError):
    """Array dimensions are inconsistent with what an operation requires."""


class TrainingError(PipelineError):
    """Optimization failed (non-finite gradients, broken state)."""


class CheckpointError(PipelineError):
    """A checkpoint file is unreadable or inconsistent with the model."""
