"""Exception types shared across the package."""


class GenvitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GenvitError):
    """Invalid configuration: bad ratios, empty corpus, unknown keys, ..."""


class InputError(GenvitError):
    """Shape / dimension / range mismatch on an operation input."""


class DecodeError(GenvitError):
    """Token id cannot be decoded against the vocabulary."""


class RoutingError(GenvitError):
    """Prompt or sequence violates the task-token routing contract."""


class TemplateError(GenvitError):
    """Prompt template is missing a required slot."""


class ModelStateError(GenvitError):
    """Model is missing state required for the requested operation."""


class DependencyError(GenvitError):
    """A required pretrained component is not available."""


class NumericError(GenvitError):
    """Numerical failure: NaN loss, zero-norm embedding, undefined mean."""


class UsageError(GenvitError):
    """Bad command line usage."""
