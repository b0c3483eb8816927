"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataFormatError(ValueError):
    """Malformed dataset file, mismatched lengths, or out-of-range annotation."""


class ShapeError(ValueError):
    pass


class EmptyTrackError(ValueError):
    """No frame of a sequence offered a candidate box."""


class BatchError(ValueError):
    pass
