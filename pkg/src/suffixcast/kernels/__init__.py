"""Kernel backend selection.

Prefers the compiled Cython core and falls back to the numpy
implementation when the extension is missing (pure-source checkout,
unsupported platform). ``SUFFIXCAST_FORCE_PY=1`` forces the fallback,
which the benchmark and equivalence tests use to load both backends.
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("SUFFIXCAST_FORCE_PY"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND: str = _impl.BACKEND
cell_forward = _impl.cell_forward
cell_backward = _impl.cell_backward
osa_distance = _impl.osa_distance
osa_distance_block = _impl.osa_distance_block


def available_backends():
    """Names of importable backends (for diagnostics and benchmarks)."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names
