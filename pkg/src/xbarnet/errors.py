"""Exception taxonomy shared across the simulator.

Grouped so the command-line front end can map failures onto exit-code
categories: configuration problems, missing or malformed data files, and
runtime simulation faults.
"""


class SimulationError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(SimulationError):
    """Bad or inconsistent configuration (unknown keys, out-of-range values)."""


class DataFormatError(SimulationError):
    """A data file exists but does not parse (bad magic, truncated payload)."""


class DataMissingError(SimulationError):
    """A required data file or directory is absent."""


class DimensionError(SimulationError):
    """Array or vector shapes do not line up with the crossbar geometry."""


class ReadRegimeError(SimulationError):
    """A read was requested outside the non-disturbing voltage window."""


class FormingRequiredError(SimulationError):
    """A write or measurement was attempted on a device never formed."""


class MeasurementError(SimulationError):
    """A characterization sweep terminated without observing the target event."""


class DivergenceError(SimulationError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, msg, *, epoch=None):
        super().__init__(msg)
        self.epoch = epoch


class SingularityError(SimulationError):
    """A computed circuit quantity lost meaning (zero feedback conductance)."""
