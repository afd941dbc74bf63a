"""Exception hierarchy.

Every error raised by the package derives from :class:`EvtcosimError` and
belongs to one of four categories.  The CLI maps the category to an exit code.
"""


class EvtcosimError(Exception):
    category = "error"


class ConfigError(EvtcosimError):
    category = "config"


class DataError(EvtcosimError):
    category = "data"


class StageOrderError(EvtcosimError):
    category = "stage-order"


class NumericalError(EvtcosimError):
    category = "numerical"
