"""Kernel engine selection.

Hot numerical kernels are written once (numba-compatible numpy code) and
compiled with ``numba.njit`` when available. Setting the environment variable
``MAXSMOOTH_NUMBA=0`` forces the pure-numpy interpretation of the same code;
``MAXSMOOTH_NUMBA=1`` requires numba and raises if it cannot be imported.

``MAXSMOOTH_THREADS`` (or the ``--threads`` CLI flag) caps the worker pool of
parallel-capable stages; results never depend on the thread count.
"""

import functools
import os

_flag = os.environ.get("MAXSMOOTH_NUMBA", "").strip()

if _flag == "0":
    NUMBA_ENABLED = False
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        if _flag == "1":
            raise ImportError(
                "MAXSMOOTH_NUMBA=1 requires numba, which is not importable"
            )
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    from numba import njit
else:

    def njit(*args, **kwargs):
        # Signature-compatible passthrough decorator.
        def wrap(f):
            @functools.wraps(f)
            def wrapper(*a, **k):
                return f(*a, **k)

            return wrapper

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return wrap(args[0])
        return wrap


def engine_name():
    return "numba" if NUMBA_ENABLED else "numpy"


def thread_count(requested=None):
    """Resolve the worker-pool size.

    Priority: explicit argument, then MAXSMOOTH_THREADS, then available
    parallelism. Always at least 1.
    """
    if requested is None:
        env = os.environ.get("MAXSMOOTH_THREADS", "").strip()
        if env:
            requested = int(env)
    if requested is None:
        requested = os.cpu_count() or 1
    return max(1, int(requested))
