"""Backend selection for the hot kernels.

Every kernel module ships a numba implementation and a pure-numpy one with
identical arithmetic. ``RG_NUMBA=0`` in the environment selects numpy at
import time; :func:`use_backend` switches at runtime (the benchmark uses it
to time both paths in one process). The switch is process-wide so worker
threads follow it.
"""

import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_BACKENDS = ("numba", "numpy")
_current = "numba" if HAVE_NUMBA and os.environ.get("RG_NUMBA", "1") != "0" else "numpy"


def njit(*args, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or a no-op when numba is absent."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def backend():
    return _current


def _check(name):
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")


def set_backend(name):
    global _current
    _check(name)
    _current = name


@contextlib.contextmanager
def use_backend(name):
    global _current
    _check(name)
    prev = _current
    _current = name
    try:
        yield
    finally:
        _current = prev


def available_backends():
    return list(_BACKENDS) if HAVE_NUMBA else ["numpy"]


def thread_count(default=1):
    """Worker count from ``RG_THREADS``; falls back to ``default``."""
    raw = os.environ.get("RG_THREADS")
    if raw is None:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("RG_THREADS must be >= 1")
    return n
