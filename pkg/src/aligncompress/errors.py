"""Exception hierarchy shared by every module of the toolkit."""


class AlignCompressError(Exception):
    """Base class for all toolkit errors."""


class DomainError(AlignCompressError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ShapeError(AlignCompressError, ValueError):
    """Tensor shapes do not compose.

    ``layer`` names the offending layer when the failure happens inside a
    network forward pass.
    """

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class NumericOverflowError(AlignCompressError, FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class TapeReuseError(AlignCompressError, RuntimeError):
    pass


class ConfigurationError(AlignCompressError, ValueError):
    pass


class CheckpointError(AlignCompressError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DegenerateModelError(AlignCompressError):
    """Compression removed every output channel of a layer."""


class MissingClassError(AlignCompressError, ValueError):
    def __init__(self, classes):
        self.classes = list(classes)
        super().__init__(f"no evaluation examples for class(es) {self.classes}")


class DivergenceError(AlignCompressError, FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")
