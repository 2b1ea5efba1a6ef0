"""Selection of the compiled (numba) or vectorized-numpy kernel backend.

The environment variable ``SMALLAREA_BACKEND`` picks the backend at import
time: ``numpy`` forces the pure-numpy fallback, ``numba`` requires the
compiled path (an error if numba is missing), and ``auto`` (the default)
uses numba when available. ``use()`` switches at runtime, e.g. in tests or
benchmarks. Both backends expose the same kernel signatures and agree to
floating-point roundoff.
"""

from __future__ import annotations

import os

ENV_VAR = "SMALLAREA_BACKEND"

_VALID = ("auto", "numba", "numpy")
_active: str | None = None
_modules: dict = {}


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _resolve(choice: str) -> str:
    if choice not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {choice!r}")
    if choice == "auto":
        return "numba" if numba_available() else "numpy"
    if choice == "numba" and not numba_available():
        raise RuntimeError("numba backend requested but numba is not importable")
    return choice


def use(choice: str) -> str:
    """Set the active backend ('auto', 'numba', or 'numpy'); returns the resolved name."""
    global _active
    _active = _resolve(choice)
    return _active


def active_name() -> str:
    global _active
    if _active is None:
        _active = _resolve(os.environ.get(ENV_VAR, "auto").lower())
    return _active


def kernels():
    """Return the kernel module for the active backend."""
    name = active_name()
    mod = _modules.get(name)
    if mod is None:
        if name == "numpy":
            from . import _kernels_numpy as mod
        else:
            from . import _kernels_numba as mod
        _modules[name] = mod
    return mod
