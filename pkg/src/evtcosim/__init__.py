"""EV charging and evacuation traffic co-simulation on a linked synthetic city."""

from .errors import ConfigError, DataError, EvtcosimError, NumericalError, StageOrderError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "EvtcosimError", "NumericalError", "StageOrderError", "__version__"]
