"""Kernel backend selection.

The compiled extension ``siag._ckernels`` is used when it imports; otherwise
the numpy implementation in ``siag._pykernels`` is used.  Setting the
environment variable ``SIAG_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os

try:
    if os.environ.get("SIAG_BACKEND", "").lower() == "python":
        raise ImportError("compiled kernels disabled by SIAG_BACKEND")
    from siag import _ckernels as _compiled
except ImportError:
    _compiled = None

DEFAULT_BACKEND = "cython" if _compiled is not None else "python"

# method codes shared by both kernel implementations
SIAG, IAG, SGD = 0, 1, 2
METHOD_CODES = {"sIAG": SIAG, "IAG": IAG, "SGD": SGD}


def available_backends() -> list[str]:
    return ["cython", "python"] if _compiled is not None else ["python"]


def get_kernels(name: str | None = None):
    name = name or DEFAULT_BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `python setup.py build_ext --inplace`")
        return _compiled
    if name == "python":
        from siag import _pykernels
        return _pykernels
    raise ValueError(f"unknown backend {name!r}")
