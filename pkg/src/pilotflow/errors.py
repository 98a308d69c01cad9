"""Exception hierarchy.

Errors that can travel between processes derive from :class:`TaskError`; they
carry a flat ``detail`` mapping so the codec can ship them and rebuild the same
class on the other side.
"""

from __future__ import annotations


class PilotflowError(Exception):
    pass


class EncodeError(PilotflowError):
    pass


class DecodeError(PilotflowError):
    pass


class ConfigError(PilotflowError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EngineShutdown(PilotflowError):
    pass


class CheckpointCorrupt(PilotflowError):
    pass


class IncompleteLog(PilotflowError):
    pass


class UnknownManager(PilotflowError):
    pass


class SpawnError(PilotflowError):
    pass


class IllegalTransition(PilotflowError):
    pass


_WIRE_ERRORS: dict[str, type[TaskError]] = {}


class TaskError(PilotflowError):
    """An error attached to a task future. Serializable."""

    def __init__(self, message: str = "", **detail):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        _WIRE_ERRORS[cls.__name__] = cls

    def __reduce__(self):
        return (_rebuild, (type(self).__name__, self.message, self.detail))

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.message == other.message
            and self.detail == other.detail
        )

    def __hash__(self):
        return hash((type(self).__name__, self.message))


def _rebuild(kind: str, message: str, detail: dict) -> TaskError:
    cls = _WIRE_ERRORS.get(kind)
    if cls is None:
        return RemoteError(message, kind=kind, **detail)
    err = cls.__new__(cls)
    TaskError.__init__(err, message, **detail)
    return err


_WIRE_ERRORS["TaskError"] = TaskError


def rebuild_error(kind: str, message: str, detail: dict) -> TaskError:
    return _rebuild(kind, message, detail)


class RemoteError(TaskError):
    """Error of a kind this process does not know about."""


class AppError(TaskError):
    """The app body raised. ``detail`` holds the original type and traceback."""

    @classmethod
    def wrap(cls, exc: BaseException, tb: str = "") -> AppError:
        return cls(
            f"{type(exc).__name__}: {exc}",
            exc_type=type(exc).__name__,
            traceback=tb,
        )


class ShellExitError(TaskError):
    def __init__(self, status: int, stderr_path: str | None = None):
        super().__init__(
            f"shell command exited with status {status}",
            status=status,
            stderr_path=stderr_path,
        )

    @property
    def status(self) -> int:
        return self.detail["status"]


class UnknownApp(TaskError):
    pass


class UnknownExecutor(TaskError):
    pass


class TemplateError(TaskError):
    pass


class SandboxError(TaskError):
    pass


class ManagerLost(TaskError):
    pass


class DependencyError(TaskError):
    """A dependency of this task failed; ``detail['root']`` names the origin."""


class TaskTimeout(TaskError):
    pass


class LlexTimeout(TaskError):
    pass


class TransferError(TaskError):
    pass


class OutputMissing(TaskError):
    pass


class BlockFailed(TaskError):
    pass
