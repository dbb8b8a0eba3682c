"""Exception hierarchy shared by all opcflow modules."""


class OpcError(Exception):
    """Base class for every error raised by opcflow."""


class SchemaError(OpcError, ValueError):
    pass


class BoundsError(OpcError, ValueError):
    pass


class FormatError(OpcError, ValueError):
    pass


class SizeMismatch(OpcError, ValueError):
    pass


class InvalidParam(OpcError, ValueError):
    pass


class DegenerateInput(OpcError, ValueError):
    pass


class InvalidBatch(OpcError, ValueError):
    pass


class DegenerateData(OpcError, ValueError):
    pass


class EmptyGraph(OpcError, LookupError):
    pass


class VersionError(OpcError):
    pass


class CorruptData(OpcError):
    pass


class MaskMissing(OpcError, LookupError):
    pass


class ConfigError(OpcError, ValueError):
    pass
