"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The Cython extension ``ovpano._ckernels`` is used when it was built; otherwise
``ovpano._pykernels`` is used. Set ``OVPANO_PURE_PYTHON=1`` to force the
fallback. ``BACKEND`` reports which one is active.
"""

import os

from . import _pykernels

if os.environ.get("OVPANO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

splat_zbuffer = _impl.splat_zbuffer
segment_accumulate = _impl.segment_accumulate
dbscan_core_labels = _impl.dbscan_core_labels


def available_backends():
    """Map backend name to its kernel module, for tests and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
