"""Exception taxonomy shared across the package.

Every failure raised by mergelab code is a ``MergeLabError`` subclass so the
CLI can map it onto a stable exit-code category.
"""


class MergeLabError(Exception):
    """Base class for all mergelab failures."""


class StructuralError(MergeLabError):
    """Shape, index, or fingerprint mismatch between parameter containers."""


class DomainError(MergeLabError):
    """An argument is outside the domain an operation is defined on."""


class GenerationError(MergeLabError):
    """Synthetic dataset generation could not satisfy its constraints."""


class TrainingError(MergeLabError):
    """Optimization diverged or a training precondition was violated."""


class ConfigError(MergeLabError):
    """Run configuration is malformed or inconsistent."""


class ArtifactError(MergeLabError):
    """A required on-disk artifact is missing or corrupt."""
