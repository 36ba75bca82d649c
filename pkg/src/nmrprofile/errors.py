"""Exception hierarchy shared by every stage of the profiling pipeline."""


class ProfilingError(Exception):
    """Base class for all errors raised by nmrprofile."""


class InvalidArgumentError(ProfilingError, ValueError):
    """An argument is malformed, non-finite or outside its documented range."""


class LibraryValidationError(ProfilingError, ValueError):
    """A spectral library failed validation.

    ``errors`` lists every offending entry, not just the first one found.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid library")


class IncompleteProfileError(ProfilingError, KeyError):
    """A profile is missing a shift or concentration needed for rendering."""

    def __str__(self):
        return str(self.args[0]) if self.args else "incomplete profile"


class ShiftDomainError(ProfilingError, ValueError):
    """A cluster shift lies outside its allowed window or the spectrum domain."""


class CannotPhaseError(ProfilingError):
    """No peak is strong enough to drive automatic phasing."""

    def __init__(self, message, noise=None):
        super().__init__(message)
        self.noise = noise


class DegenerateBaselineError(ProfilingError):
    """Iterative thresholding left (almost) no baseline points."""


class ReferenceNotFoundError(ProfilingError):
    """No qualifying reference peak inside the referencing window."""


class TemperatureTooLowError(ProfilingError):
    """Every particle weight underflowed; the annealing start temperature is too small."""
