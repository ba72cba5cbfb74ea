"""Hot numeric kernels with selectable backend.

Two interchangeable implementations exist: numba-compiled loops
(``_numba``) and pure numpy (``_numpy``). The active backend is chosen at
import time from the ``DUODEPTH_BACKEND`` environment variable:

    DUODEPTH_BACKEND=numba   force numba (error if unavailable)
    DUODEPTH_BACKEND=numpy   force the pure-numpy fallback
    unset / auto             numba when importable, else numpy

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _numpy

_KERNEL_NAMES = (
    "im2col",
    "col2im",
    "bilinear_gather",
    "bilinear_gather_bwd",
    "corr_volume",
    "corr_volume_bwd",
    "median_pool",
    "median_pool_bwd",
)


def _load_numba():
    from . import _numba

    return _numba


def _select_backend():
    choice = os.environ.get("DUODEPTH_BACKEND", "auto").lower()
    if choice == "numpy":
        return _numpy, "numpy"
    if choice == "numba":
        return _load_numba(), "numba"
    if choice != "auto":
        raise ValueError(f"DUODEPTH_BACKEND must be 'numba', 'numpy' or 'auto', got {choice!r}")
    try:
        return _load_numba(), "numba"
    except ImportError:
        return _numpy, "numpy"


_impl, _name = _select_backend()


def backend_name() -> str:
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return _name


def get_backend(name: str):
    """Fetch a backend module by name (used by tests and benchmarks)."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        return _load_numba()
    raise ValueError(f"unknown backend {name!r}")


def _bind(impl):
    for k in _KERNEL_NAMES:
        globals()[k] = getattr(impl, k)


_bind(_impl)


def use_backend(name: str) -> None:
    """Rebind kernels to the named backend (tests only; not thread-safe)."""
    global _name
    _bind(get_backend(name))
    _name = name
