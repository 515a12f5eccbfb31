class ConfigError(ValueError):
    """Invalid hyperparameters or an unusable graph/config combination."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be used: bad version, or trained on a different graph."""


class SplitError(ValueError):
    pass
