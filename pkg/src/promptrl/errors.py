"""Exception hierarchy shared across the package."""


class PromptRLError(Exception):
    """Base class for all errors raised by promptrl."""


class ConfigError(PromptRLError):
    pass


class ContractError(PromptRLError, ValueError):
    """A caller violated an operation's precondition."""


class IntegrityError(PromptRLError):
    pass


class NumericError(PromptRLError, FloatingPointError):
    pass


class UndefinedRatioError(PromptRLError, ZeroDivisionError):
    pass


class DatasetError(PromptRLError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StorageError(PromptRLError, OSError):
    pass


class CheckpointError(PromptRLError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    def __init__(self, stored: str, current: str):
        self.stored = stored
        self.current = current
        super().__init__(
            f"tokenizer fingerprint mismatch: checkpoint={stored} current={current}"
        )


class BackendError(PromptRLError):
    pass


class BackendUnavailable(BackendError):
    pass


class BackendRejected(BackendError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"backend rejected request (HTTP {status}): {detail}".rstrip(": "))


class BackendTimeout(BackendError):
    pass


class StepError(PromptRLError):
    """Every prompt of a training batch failed."""
