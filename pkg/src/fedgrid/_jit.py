"""Numba switch for the hot kernels.

Kernels are written in the numba-compatible subset of numpy. With
``FEDGRID_JIT=0`` (or numba missing) they run as plain numpy functions, which
is slower but bit-for-bit the same algorithm.
"""
from __future__ import annotations

import os
from typing import Callable

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FALSE = {"0", "false", "no", "off"}


def jit_requested() -> bool:
    return os.environ.get("FEDGRID_JIT", "1").strip().lower() not in _FALSE


USE_JIT = numba is not None and jit_requested()

# name -> (python function, jitted dispatcher or None). Kernels call each other
# through module globals, so mixing modes inside one process is not supported;
# compare modes in separate processes (see benchmarks/bench_kernels.py).
_REGISTRY: dict[str, tuple[Callable, Callable | None]] = {}


def kernel(fn: Callable) -> Callable:
    """Register ``fn`` and return the implementation selected by the env flag."""
    jitted = numba.njit(cache=True)(fn) if numba is not None else None
    _REGISTRY[fn.__name__] = (fn, jitted)
    if USE_JIT and jitted is not None:
        return jitted
    return fn


def kernel_names() -> list[str]:
    return sorted(_REGISTRY)
