"""Backend selection for the hot loops.

Operator traversals are compiled with numba when it is available. Setting
NPA_BACKEND=numpy forces the pure-numpy fallback path, which produces
bitwise-identical results (same accumulation order, same float64 scratch
accumulators) at lower throughput. NPA_BACKEND=numba insists on numba and
raises if it cannot be imported.
"""

import os

_env = os.environ.get("NPA_BACKEND", "").strip().lower()

if _env not in ("", "numba", "numpy"):
    raise RuntimeError(f"NPA_BACKEND must be 'numba' or 'numpy', got {_env!r}")

if _env == "numpy":
    HAVE_NUMBA = False
else:
    try:
        import numba  # noqa: F401
        HAVE_NUMBA = True
    except ImportError:
        if _env == "numba":
            raise
        HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"
