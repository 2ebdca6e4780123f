"""Kernel backend selection: numba-jitted hot loops with a pure-numpy fallback.

The backend is chosen once at import from the environment:

    PCAPLAB_BACKEND=numba   (default when numba imports cleanly)
    PCAPLAB_BACKEND=numpy   (vectorized fallback, no JIT)

PCAPLAB_THREADS caps the numba thread pool used by prange kernels.
"""

import os
import warnings

_HAS_NUMBA = False
try:
    import numba
    from numba import njit, prange
    _HAS_NUMBA = True
except Exception:  # pragma: no cover - exercised only on broken installs
    numba = None

    def njit(*args, **kwargs):
        def wrap(func):
            return func
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range


def requested_backend():
    """Backend name requested via env, normalised to 'numba' or 'numpy'."""
    name = os.environ.get("PCAPLAB_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        warnings.warn(f"unknown PCAPLAB_BACKEND={name!r}, using numba")
        name = "numba"
    if name == "numba" and not _HAS_NUMBA:
        warnings.warn("numba unavailable, falling back to numpy backend")
        name = "numpy"
    return name


def has_numba():
    return _HAS_NUMBA


def configure_threads():
    """Apply PCAPLAB_THREADS to the numba thread pool, if set."""
    if not _HAS_NUMBA:
        return
    val = os.environ.get("PCAPLAB_THREADS")
    if not val:
        return
    try:
        n = max(1, int(val))
    except ValueError:
        warnings.warn(f"ignoring non-integer PCAPLAB_THREADS={val!r}")
        return
    try:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except Exception as exc:  # pragma: no cover
        warnings.warn(f"could not set numba threads: {exc}")


configure_threads()
