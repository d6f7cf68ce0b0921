__version__ = "{version}"

__all__ = [
    "bench",
    "experiment",
]
