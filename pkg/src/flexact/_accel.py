"""Numba switch.

Set ``FLEXACT_DISABLE_NUMBA=1`` to force the pure-numpy kernels. If numba is
not importable the numpy kernels are used regardless.
"""

import os

_FLAG = os.environ.get("FLEXACT_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable.

    Compilation does not depend on ``NUMBA_ENABLED`` so both paths stay
    available to tests and the benchmark; dispatch happens in ``kernels``.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)
