"""Exception types raised by the filters and the experiment tooling."""


class GridFlowError(Exception):
    """Base class for all errors raised by gridflow."""


class FilterDivergence(GridFlowError):
    """A density collapsed to zero mass; the filter can no longer continue."""


class DegenerateDensityError(FilterDivergence):
    pass


class SingularJacobianError(FilterDivergence):
    pass


class GridDesignError(GridFlowError):
    pass


class ConfigError(GridFlowError, ValueError):
    """Invalid experiment configuration. The message names the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class SimulationError(GridFlowError):
    """No admissible truth trajectory could be drawn."""
