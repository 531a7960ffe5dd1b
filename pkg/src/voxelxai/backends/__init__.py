"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy
implementation is always available. Override with VOXELXAI_BACKEND=numpy
or VOXELXAI_BACKEND=native.
"""

import os

from . import numpy_kernels

_backends = {"numpy": numpy_kernels}

try:
    from . import _native

    _backends["native"] = _native
except ImportError:
    pass

_requested = os.environ.get("VOXELXAI_BACKEND", "").strip().lower()
if _requested and _requested not in _backends:
    raise ImportError(
        f"VOXELXAI_BACKEND={_requested!r} but available backends are "
        f"{sorted(_backends)}"
    )

_active = _backends[_requested] if _requested else _backends.get("native", numpy_kernels)


def available():
    return sorted(_backends)


def get(name):
    return _backends[name]


def active():
    return _active


def active_name():
    return _active.NAME
