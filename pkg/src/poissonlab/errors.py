"""Exception hierarchy shared by the package."""


class PoissonLabError(Exception):
    """Base class for all package errors."""


class DomainError(PoissonLabError, ValueError):
    """A window, point or support falls outside the region where it is defined."""


class ConfigurationError(PoissonLabError, RuntimeError):
    """A model or sampler was configured inconsistently (e.g. a bad envelope)."""


class ContractError(PoissonLabError, ValueError):
    """A declared bound or invariant was violated at evaluation time."""


class ParameterError(PoissonLabError, ValueError):
    """An algorithm parameter is out of its admissible range."""


class BufferOverflowError(DomainError):
    """A transport root bracket escaped the padded simulation window."""
