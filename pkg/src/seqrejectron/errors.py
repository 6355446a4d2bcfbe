"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SeqRejectronError(Exception):
    """Base class for library errors."""


class ConfigurationError(SeqRejectronError, ValueError):
    """Bad shapes, parameters or file contents."""


class ValidationError(SeqRejectronError, ValueError):
    """An argument violates a documented precondition."""


class EmptyInputError(ValidationError):
    pass


class MissingActionsError(ValidationError):
    pass


class EnumerationTooLarge(SeqRejectronError):
    """Exact enumeration would exceed the support budget."""


class RealizabilityError(SeqRejectronError):
    """No class member is consistent with the labeled data.

    Use the misspecified fitting path (``fit_misspecified``) instead.
    """


class NoSupportError(SeqRejectronError):
    """Every policy assigns zero likelihood to the training data."""
