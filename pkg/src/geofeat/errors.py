"""Exception types shared across the toolkit."""


class GeoFeatError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(GeoFeatError, ValueError):
    """Input violates a documented precondition (CLI exit code 1)."""


class ConfigInvalid(ValidationError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(message or f"invalid configuration key or value: {key!r}")


class NonPositiveDepth(ValidationError):
    pass


class DegenerateGeometry(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class NonPositiveScale(ValidationError):
    pass


class NoSharedTracks(ValidationError):
    pass


class SizeMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class NoGroundTruth(ValidationError):
    pass


class DegenerateCovariance(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class UnknownCommand(ValidationError):
    pass


class StreamExhausted(GeoFeatError):
    pass


class NonFiniteLoss(GeoFeatError):
    def __init__(self, match_set_index, value):
        self.match_set_index = match_set_index
        self.value = value
        super().__init__(f"non-finite loss {value!r} in match set {match_set_index}")


class CorruptFile(GeoFeatError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"corrupt file at byte offset {offset}: {message}")
