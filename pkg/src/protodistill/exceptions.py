"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class EmptyMaskError(ValueError):
    """A masked reduction was asked to average over zero positions."""


class DegenerateVectorError(ValueError):
    """A correlation involves a (numerically) constant vector."""


class InsufficientPairsError(ValueError):
    """Too few non-zero paired differences for a signed-rank test."""


class FormatError(IOError):
    """A binary artifact has a bad magic, version, or length."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss)."""


class ConfigError(ValueError):
    """A run configuration failed validation.

    ``path`` is the dotted field path that was rejected.
    """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
