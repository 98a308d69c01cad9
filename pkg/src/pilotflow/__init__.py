"""Dataflow task execution over pluggable executors and elastic resources."""

from .codec import FileRef, UnixStatus
from .dflow import DataFlowKernel
from .errors import (AppError, DependencyError, ManagerLost, ShellExitError, TaskError,
                     UnknownApp, UnknownExecutor)
from .executors import LocalExecutor
from .tasks import App, AppFuture, TaskState, native_app, shell_app

__version__ = "0.1.0"

__all__ = [
    "App", "AppError", "AppFuture", "DataFlowKernel", "DependencyError", "FileRef",
    "LocalExecutor", "ManagerLost", "ShellExitError", "TaskError", "TaskState",
    "UnixStatus", "UnknownApp", "UnknownExecutor", "native_app", "shell_app",
]
