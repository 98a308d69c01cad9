from .executor import LowLatencyExecutor

__all__ = ["LowLatencyExecutor"]
