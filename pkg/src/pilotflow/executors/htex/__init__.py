from .executor import HighThroughputExecutor

__all__ = ["HighThroughputExecutor"]
