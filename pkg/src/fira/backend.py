"""Kernel backend selection.

The compiled extension is preferred when present; setting the
environment variable FIRA_PURE_PYTHON (to any non-empty value) forces
the numpy fallback.  Both backends expose the same two functions with
identical semantics, so everything above this module is agnostic to
which one is active.
"""

import os

if os.environ.get("FIRA_PURE_PYTHON"):
    from fira import _kernels_py as _impl
else:
    try:
        from fira import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from fira import _kernels_py as _impl

COMPILED = _impl.COMPILED
jacobi_sweeps = _impl.jacobi_sweeps
adam_update = _impl.adam_update


def backend_name() -> str:
    """Name of the active kernel backend."""
    return "compiled" if COMPILED else "pure-python"
