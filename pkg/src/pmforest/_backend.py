"""Kernel backend selection.

The compiled extension is preferred. Set ``PMFOREST_PURE_PYTHON=1`` to force
the numpy fallback (used by the backend-equivalence tests and the benchmark).
"""

import importlib
import os

_FORCE_PURE = os.environ.get("PMFOREST_PURE_PYTHON", "") not in ("", "0")


def _load(pure: bool):
    if not pure:
        try:
            return importlib.import_module("pmforest._kernels"), "cython"
        except ImportError:
            pass
    return importlib.import_module("pmforest._fallback"), "python"


kernels, BACKEND = _load(_FORCE_PURE)


def get_kernels(name: str | None = None):
    """Return a kernel module by name ("cython" or "python"); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return importlib.import_module("pmforest._fallback")
    if name == "cython":
        return importlib.import_module("pmforest._kernels")
    raise ValueError(f"unknown backend {name!r}")
