"""Exception hierarchy shared across the pipeline."""


class YarnShellError(Exception):
    """Base class for all pipeline errors."""


class InvalidInputError(YarnShellError):
    """An argument violates a documented precondition."""


class SingularConfigurationError(YarnShellError):
    """Relative rotation between adjacent frames is near 180 degrees."""


class PatternLoadError(YarnShellError):
    """Pattern file failed to parse or violates a structural invariant."""


class ConvergenceError(YarnShellError):
    """Quasi-static solve did not reach the requested tolerances."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContactError(YarnShellError):
    """Contact resolution deadlocked (persistent interpenetration)."""


class DegenerateElementError(YarnShellError):
    """Zero-area triangle or singular rest metric."""


class InvalidModuliError(YarnShellError):
    """Orthotropic moduli violate the reciprocity relation."""


class InvalidSampleError(YarnShellError):
    """Deformation sample cannot be embedded (e.g. curvature too large)."""


class UnderdeterminedFitError(YarnShellError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, message, unidentifiable=()):
        super().__init__(message)
        self.unidentifiable = tuple(unidentifiable)


class StageDependencyError(YarnShellError):
    """A pipeline stage is missing an upstream artifact."""


class ConfigError(YarnShellError):
    """Run configuration failed schema validation."""
