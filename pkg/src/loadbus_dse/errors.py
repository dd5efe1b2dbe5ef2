"""Exception hierarchy shared across the package."""


class DSEError(Exception):
    """Base class for all errors raised by loadbus_dse."""


class WaveformFormatError(DSEError):
    """Malformed waveform file (bad header, non-numeric cells)."""


class SizeError(DSEError):
    """Too few samples for the requested operation."""


class NonUniformSamplingError(WaveformFormatError):
    pass


class RangeError(DSEError):
    """Empty, reversed or out-of-bounds time window."""


class ConfigurationError(DSEError):
    """Invalid topology/hypothesis pairing or invalid settings."""


class ShapeError(DSEError):
    pass


class DegenerateInputError(DSEError):
    """Measured channels carry no signal to initialise from."""


class SingularSystemError(DSEError):
    """Normal equations could not be factorised at the requested damping."""


class DivergenceError(DSEError):
    """Time integration blew up."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ScenarioError(ConfigurationError):
    """Scenario fields violate their invariants."""
