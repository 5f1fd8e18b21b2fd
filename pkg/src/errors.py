# src/errors.py


class HdnnError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(HdnnError):
    pass


class DomainError(HdnnError):
    pass


class NumericError(HdnnError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ParameterError(HdnnError):
    pass


class ConfigurationError(HdnnError):
    pass


class ConsistencyError(HdnnError):
    pass


class StructuralError(HdnnError):
    pass


class CapacityError(HdnnError):
    pass


class FormatError(HdnnError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
