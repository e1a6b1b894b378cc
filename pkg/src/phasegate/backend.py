"""Selects the sequence-engine implementation.

The compiled extension is used when importable; set PHASEGATE_BACKEND to
"python" or "compiled" to force one side (useful for benchmarks and for
cross-checking the two implementations).
"""

from __future__ import annotations

import os

from .errors import ConfigError

try:
    from . import _speedups
except ImportError:
    _speedups = None


def compiled_available() -> bool:
    return _speedups is not None


def resolve(name: str | None = None) -> str:
    """Map an explicit or environment-requested backend name to a real one."""
    if name is None:
        name = os.environ.get("PHASEGATE_BACKEND", "").strip().lower() or None
    if name is None:
        return "compiled" if _speedups is not None else "python"
    if name in ("python", "py"):
        return "python"
    if name in ("compiled", "cython", "c"):
        if _speedups is None:
            raise ConfigError("compiled backend requested but the extension is not built")
        return "compiled"
    raise ConfigError(f"unknown backend {name!r} (expected 'python' or 'compiled')")


def kernel():
    if _speedups is None:
        raise ConfigError("compiled extension not available")
    return _speedups
