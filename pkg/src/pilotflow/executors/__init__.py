from .base import ExecFuture, ExecutionKernel, Executor, ExecutorStatus, render_command
from .local import ImmediateExecutor, LocalExecutor

__all__ = ["ExecFuture", "ExecutionKernel", "Executor", "ExecutorStatus",
           "ImmediateExecutor", "LocalExecutor", "render_command"]
