class ConfigError(ValueError):
    """Inconsistent configuration, detected before any computation runs."""


class ParseError(ValueError):
    """Malformed input file; the message names the offending line."""


class DataConflictError(ValueError):
    """The same (sample, channel, time) key carries two different values."""


class CheckpointError(KeyError):
    """Checkpoint keys missing or shaped differently from the model."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
