"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """An operation produced or encountered a non-finite value."""


class ContractError(RuntimeError):
    """A caller violated an API precondition."""


class ConfigError(ValueError):
    """A run-config file is malformed or out of range."""


class CheckpointError(IOError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint magic or format version does not match."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before the manifest said it would."""


class CheckpointManifestError(CheckpointError):
    """Checkpoint manifest disagrees with the payload or expected shapes."""


class DemoFileError(IOError):
    """Demonstration file is malformed."""


class EnvError(RuntimeError):
    """The environment was driven into an invalid state."""
