"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the NumPy
implementation is used. ``VOLCAP_BACKEND=python`` forces the fallback and
``VOLCAP_BACKEND=cython`` makes a missing extension an import error.
"""

from __future__ import annotations

import os

from . import _pykernels

_requested = os.environ.get("VOLCAP_BACKEND", "").strip().lower()
if _requested not in ("", "cython", "python"):
    raise ImportError(f"VOLCAP_BACKEND must be 'cython' or 'python', got {_requested!r}")

_compiled = None
if _requested != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _requested == "cython":
            raise

BACKENDS = {"python": _pykernels}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

_active = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"

splat_weighted = _active.splat_weighted
marching_cubes = _active.marching_cubes
rasterize = _active.rasterize


def get_backend() -> str:
    return BACKEND


def get_module(name: str | None = None):
    """Kernel module for ``name`` (default: the active backend)."""
    if name is None:
        return _active
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available (have {sorted(BACKENDS)})") from None
