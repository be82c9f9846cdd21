"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, range, arity)."""


class ConfigurationError(ValueError):
    """Inconsistent or unusable configuration."""


class GenerationError(RuntimeError):
    """Procedural generation gave up after its retry budget."""


class SamplingError(RuntimeError):
    """No episode satisfying the requested constraints could be drawn."""


class GridIOError(IOError):
    """Base class for grid / checkpoint file decoding failures."""


class BadMagicError(GridIOError):
    pass


class BadVersionError(GridIOError):
    pass


class TruncatedFileError(GridIOError):
    pass
