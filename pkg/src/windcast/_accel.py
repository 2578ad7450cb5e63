"""Numba availability and runtime kernel selection.

Hot loops (tree growing, tree application, pooled-CRPS objectives) exist in
two variants: numba ``@njit`` kernels and pure-numpy fallbacks with identical
signatures and identical arithmetic.  The numpy path is selected when numba
is not installed or when the environment variable ``WINDCAST_NO_NUMBA`` is
set to a truthy value.  Both paths must agree bit-for-bit on tree structure
and to float tolerance on integrals; ``tests/test_accel.py`` enforces this.
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via env flag instead
    NUMBA_AVAILABLE = False

_TRUTHY = {"1", "true", "yes", "on"}


def numba_enabled() -> bool:
    """True when numba kernels should be used for hot loops."""
    flag = os.environ.get("WINDCAST_NO_NUMBA", "").strip().lower()
    if flag in _TRUTHY:
        return False
    return NUMBA_AVAILABLE


def get_kernels():
    """Return the kernel module for the current configuration.

    Checked per call, so flipping ``WINDCAST_NO_NUMBA`` between fits switches
    paths without reimporting the package.
    """
    if numba_enabled():
        from . import _kernels_numba

        return _kernels_numba
    from . import _kernels_numpy

    return _kernels_numpy
