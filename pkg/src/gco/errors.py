"""Exception types raised across gco."""


class GcoError(Exception):
    """Base class for every gco error."""
    pass


class ConfigError(GcoError):
    """Invalid configuration value; `field` holds the dotted key (e.g. "sampling.n_steps")."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(GcoError, ValueError):
    """Tensor geometry does not match what the operation expects."""
    pass


class ScheduleError(GcoError, ValueError):
    """Invalid noise schedule parameters or step indices."""
    pass


class AttributeValueError(GcoError, ValueError):
    """Attribute value outside its closed vocabulary."""
    pass


class UnreadableRegionError(GcoError):
    """Face region cannot be read by the rule-based classifier."""
    pass


class LayoutError(GcoError, ValueError):
    """Denoiser channel layout does not match the stage that uses it."""
    pass


class CheckpointError(GcoError):
    """Checkpoint could not be read or written."""
    pass


class HashMismatchError(CheckpointError):
    pass


class SchemaMismatchError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Checkpoint of the wrong kind or channel layout for the command."""

    def __init__(self, message: str, expected_layout=None):
        self.expected_layout = expected_layout
        if expected_layout:
            message = f"{message} (expected channel layout: {' | '.join(expected_layout)})"
        super().__init__(message)
