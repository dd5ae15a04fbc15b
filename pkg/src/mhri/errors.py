"""Exception types raised across the package."""


class MhriError(Exception):
    """Base class for all package errors."""


class DimensionError(MhriError, ValueError):
    pass


class ConfigError(MhriError, ValueError):
    pass


class ContractError(MhriError, ValueError):
    pass


class LabelError(MhriError, ValueError):
    pass


class ParseError(MhriError, ValueError):
    pass


class SchemaError(MhriError, ValueError):
    pass


class SerializationError(MhriError, ValueError):
    pass


class CapacityError(MhriError, ValueError):
    pass


class TrainingStateError(MhriError, RuntimeError):
    pass


class DivergenceError(MhriError, RuntimeError):
    pass


class CheckpointError(MhriError, ValueError):
    pass
