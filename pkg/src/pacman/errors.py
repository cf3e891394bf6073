"""Exception hierarchy shared across the storage, logging and recovery layers."""


class PacmanError(Exception):
    """Base class for every error raised by this package."""


class IntegrityError(PacmanError):
    """A durable file (checkpoint, log batch, manifest) failed validation."""

    def __init__(self, message, path=None):
        self.path = str(path) if path is not None else None
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class FlushError(PacmanError):
    """A group-commit flush could not be persisted; pepoch was not advanced."""


class CheckpointError(PacmanError):
    """Writing a checkpoint failed; the previous checkpoint stays authoritative."""


class RecoveryError(PacmanError):
    """Base class for failures during log replay."""


class UnrecoverableLogError(RecoveryError):
    """The log references a procedure the registry does not know."""


class ReplayDivergence(RecoveryError):
    """A logged (committed) transaction failed during re-execution.

    Command logging only persists committed transactions, so this means the
    recovered state no longer matches the pre-crash state.
    """


class LogModeError(RecoveryError):
    """The requested recovery scheme cannot consume the entries in this log."""
