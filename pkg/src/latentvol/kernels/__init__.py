"""Hot-kernel dispatch: numba-compiled kernels with a pure-numpy fallback.

The active backend is chosen once at import from the ``LATENTVOL_BACKEND``
environment variable and can be switched at runtime with :func:`set_backend`:

  * ``auto``  (default) - numba if it imports, else numpy
  * ``numba`` - force the compiled kernels; raises if numba is unavailable
  * ``numpy`` - force the pure-numpy reference path

Both backends are semantically identical; see ``benchmarks/bench_kernels.py``
for a timing comparison.
"""

from __future__ import annotations

import os

from . import _numpy

_IMPLS = {"numpy": _numpy}
_active_name = "numpy"

KERNEL_NAMES = (
    "conv3d_forward",
    "conv3d_backward_x",
    "conv3d_backward_w",
    "nearest_codes",
    "trilinear_resample",
)


def _load_numba():
    if "numba" not in _IMPLS:
        from . import _numba
        _IMPLS["numba"] = _numba
    return _IMPLS["numba"]


def numba_available() -> bool:
    try:
        _load_numba()
        return True
    except ImportError:
        return False


def set_backend(name: str) -> None:
    """Select the kernel backend: 'auto', 'numba' or 'numpy'."""
    global _active_name
    if name == "auto":
        name = "numba" if numba_available() else "numpy"
    if name == "numba":
        _load_numba()
    elif name != "numpy":
        raise ValueError(f"unknown kernel backend {name!r}")
    _active_name = name
    impl = _IMPLS[name]
    for fn in KERNEL_NAMES:
        globals()[fn] = getattr(impl, fn)


def get_backend() -> str:
    return _active_name


set_backend(os.environ.get("LATENTVOL_BACKEND", "auto"))
