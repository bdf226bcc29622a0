"""Regression-based token mixers with a taped autograd and training harness.

Submodules are imported lazily so the CLI can configure BLAS thread caps
before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autograd", "bench", "checks", "cli", "config", "errors", "linalg",
    "mixers", "model", "report", "rng", "rope", "tasks", "training",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
