"""Backend selection for the hot loops.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. Set ``ORTHOHEAT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("ORTHOHEAT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

zbuffer = _impl.zbuffer
fuse_scores = _impl.fuse_scores
# numpy's vectorized argmax already beats a compiled scan; first index wins on ties
argmax_first = _kernels_py.argmax_first

__all__ = ["BACKEND", "zbuffer", "fuse_scores", "argmax_first"]
