"""Shared exception types."""


class TracegenError(Exception):
    pass


class InvalidInputError(TracegenError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(TracegenError):
    """A configuration document or requested setup is inconsistent."""


class TrainingError(TracegenError):
    """Training produced non-finite values or violated a sanity contract."""


class SamplingError(TracegenError):
    """A stratified down-sampling quota cannot be met."""


class RunStateError(TracegenError):
    """A run directory is missing, locked, corrupted, or out of sequence."""


class ContractViolation(TracegenError):
    """A caller broke an internal API contract (e.g. an unfrozen model)."""
