"""Exception types shared across the dagcomm package."""


class DagCommError(Exception):
    """Base class for every error raised by dagcomm."""


class ContractError(DagCommError):
    """A caller broke a precondition (bad shape, cyclic graph, invalid action...)."""


class DimensionError(ContractError):
    """Array shapes do not compose."""


class NumericError(DagCommError):
    """A NaN or Inf showed up where only finite values are allowed.

    Args:
        message: human readable description
        layer: index of the offending layer, if known
        term: name of the offending loss term, if known
    """

    def __init__(self, message, layer=None, term=None):
        super().__init__(message)
        self.layer = layer
        self.term = term


class ConfigError(DagCommError):
    """Run configuration could not be read or failed validation."""


class CheckpointError(DagCommError):
    """Checkpoint file is missing, truncated or not in DAGCOMM1 format."""
